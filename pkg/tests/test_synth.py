import dataclasses

import pytest

from multisource_qa.core.synth import (
    SOURCES,
    DatasetFormatError,
    SynthConfig,
    Vocabulary,
    dataset_checksum,
    decode_from_context,
    decode_from_image,
    detokenize,
    generate_dataset,
    generate_samples,
    home_sources,
    load_dataset,
    save_dataset,
    split_dataset,
    split_ranges,
    tokenize,
)


def test_default_vocabulary_and_splits():
    cfg = SynthConfig()
    assert Vocabulary(cfg).size == 99
    assert [len(r) for r in split_ranges(cfg).values()] == [5000, 1000, 1000]


def test_generation_is_deterministic(tiny_synth):
    a = generate_dataset(tiny_synth, "train")
    b = generate_dataset(tiny_synth, "train")
    assert a.samples == b.samples
    assert dataset_checksum(a) == dataset_checksum(b)
    other = generate_dataset(dataclasses.replace(tiny_synth, seed=4), "train")
    assert dataset_checksum(other) != dataset_checksum(a)


def test_sharded_generation_equals_serial(tiny_synth):
    ids = range(0, 30)
    assert generate_samples(tiny_synth, ids, workers=3) == generate_samples(tiny_synth, ids, workers=1)


def test_splits_are_disjoint(tiny_synth):
    full = generate_dataset(tiny_synth)
    parts = split_dataset(full)
    ids = [{s.id for s in parts[name].samples} for name in ("train", "val", "test")]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert [len(parts[name]) for name in ("train", "val", "test")] == [24, 8, 8]
    assert parts["val"].samples == generate_dataset(tiny_synth, "val").samples


def test_context_only_mix(tiny_synth):
    cfg = dataclasses.replace(tiny_synth, source_mix=(1.0, 0.0, 0.0))
    ds = generate_dataset(cfg, "train")
    assert ds.source_counts() == {"context": 24, "image": 0, "both": 0}
    assert home_sources(cfg) == ["context"] * 4


def test_answers_are_recoverable_from_their_source(tiny_synth):
    vocab = Vocabulary(tiny_synth)
    cfg = dataclasses.replace(tiny_synth, n_train=200, source_mix=(0.34, 0.33, 0.33))
    ds = generate_dataset(cfg, "train")
    seen = set()
    for s in ds.samples:
        attribute, value = vocab.value_of(s.answer_ids[0])
        assert attribute == s.attribute_id
        seen.add(s.source_label)
        if s.source_label in ("image", "both"):
            assert decode_from_image(s, cfg) == value
        if s.source_label in ("context", "both"):
            assert decode_from_context(s, vocab) == value
        else:
            assert decode_from_context(s, vocab) is None
            assert s.answer_ids[0] not in s.context_ids
    assert seen == set(SOURCES)


def test_samples_fit_the_model_window(tiny_synth):
    for s in generate_dataset(tiny_synth, "train").samples:
        assert len(s.context_ids) <= tiny_synth.k
        assert s.question_ids == [s.context_ids[0]]
        assert s.image.pixels.shape == (3, 8, 8)


class TestTokenize:
    def test_round_trip(self, tiny_synth):
        vocab = Vocabulary(tiny_synth)
        tokens = ["attr1", "attr1:val2", "word3"]
        assert detokenize(tokenize(tokens, vocab), vocab) == tokens

    def test_padding(self, tiny_synth):
        vocab = Vocabulary(tiny_synth)
        assert vocab.index["<pad>"] == 0
        assert tokenize(["attr0"], vocab, length=4) == [3, 0, 0, 0]

    def test_unknown_token(self, tiny_synth):
        with pytest.raises(ValueError, match="unknown token"):
            tokenize(["attr99"], Vocabulary(tiny_synth))
        with pytest.raises(ValueError):
            detokenize([27], Vocabulary(tiny_synth))


class TestConfigValidation:
    def test_vocab_limit(self, tiny_synth):
        with pytest.raises(ValueError, match="overflows"):
            generate_dataset(tiny_synth, "val", vocab_limit=20)

    @pytest.mark.parametrize("change", [
        {"source_mix": (0.5, 0.5, 0.5)},
        {"patch_size": 3},
        {"k": 5},
        {"n_distractor_pairs": 4},
        {"attribute_affinity": 1.5},
    ])
    def test_rejects_invalid(self, tiny_synth, change):
        with pytest.raises(ValueError):
            dataclasses.replace(tiny_synth, **change).validate()

    def test_unknown_split(self, tiny_synth):
        with pytest.raises(ValueError):
            generate_dataset(tiny_synth, "dev")

    def test_from_dict_rejects_unknown_fields(self):
        with pytest.raises(ValueError, match="n_colours"):
            SynthConfig.from_dict({"n_colours": 3})


class TestFiles:
    def test_save_and_load(self, tiny_splits, tmp_path):
        path = tmp_path / "train.jsonl"
        save_dataset(tiny_splits["train"], str(path))
        loaded = load_dataset(str(path))
        assert loaded.samples == tiny_splits["train"].samples
        assert loaded.split == "train"
        assert dataset_checksum(loaded) == dataset_checksum(tiny_splits["train"])

    def test_truncated_file(self, tiny_splits, tmp_path):
        path = tmp_path / "train.jsonl"
        save_dataset(tiny_splits["train"], str(path))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DatasetFormatError) as err:
            load_dataset(str(path))
        assert err.value.index == 23

    def test_corrupt_record_names_its_index(self, tiny_splits, tmp_path):
        path = tmp_path / "train.jsonl"
        save_dataset(tiny_splits["train"], str(path))
        lines = path.read_text().splitlines()
        lines[2] = lines[2][:40]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="record 1"):
            load_dataset(str(path))

    def test_bad_header(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DatasetFormatError) as err:
            load_dataset(str(path))
        assert err.value.index == "header"
        path.write_text('{"format": "other"}\n')
        with pytest.raises(DatasetFormatError, match="header"):
            load_dataset(str(path))
