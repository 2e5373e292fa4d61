"""
Parameters and the module tree that names them.
"""
import logging

import numpy as np

from multisource_qa.core.tensor import Tensor

logger = logging.getLogger("multisource_qa.core.module")


class Parameter(Tensor):
    """A learnable tensor with a dotted path name and a trainable flag."""

    def __init__(self, data, name="", trainable=True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Module:
    """
    Base class for anything holding parameters.

    Parameters and sub-modules assigned as attributes are registered in
    assignment order, which makes parameter paths deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        children = self.__dict__.get("_children")
        if children is None:
            raise RuntimeError(f"{type(self).__name__}.__init__ must call Module.__init__ first")
        if isinstance(value, (Parameter, Module)):
            children[key] = value
        elif key in children:
            del children[key]
        object.__setattr__(self, key, value)

    def named_children(self):
        return [(k, v) for k, v in self._children.items() if isinstance(v, Module)]

    def named_parameters(self, prefix=""):
        """Yield ``(path, parameter)`` pairs depth-first."""
        for key, value in self._children.items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path)

    def named_modules(self, prefix=""):
        yield prefix, self
        for key, child in self.named_children():
            path = f"{prefix}.{key}" if prefix else key
            yield from child.named_modules(path)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        """Write each parameter's path into ``Parameter.name``."""
        seen = set()
        for path, param in self.named_parameters(prefix):
            if path in seen:
                raise ValueError(f"duplicate parameter path {path}")
            seen.add(path)
            param.name = path
        return self

    def parameter_count(self, trainable_only=False):
        return int(sum(p.size for p in self.parameters() if p.trainable or not trainable_only))


def init_normal(rng, shape, std):
    return Parameter(rng.normal(0.0, std, size=shape))


def init_zeros(shape):
    return Parameter(np.zeros(shape))


def init_ones(shape):
    return Parameter(np.ones(shape))
