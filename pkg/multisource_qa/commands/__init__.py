"""
Command modules for the multisource-qa CLI.
"""
