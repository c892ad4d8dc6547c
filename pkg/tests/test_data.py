import os

import numpy as np
import numpy.testing as npt
import pytest

from relcap import data as D
from relcap.errors import ConfigError, DataFormatError, UsageError
from relcap.geometry import BoundingBox
from relcap.model import CaptionModel, config_with_mode, toy_config
from relcap.data import (
    BOS_ID, EOS_ID, UNK_ID,
    CaptionRecord, Corpus, FeatureRecord, Scene, SceneObject, Vocab,
    build_vocab, generate_corpus, load_checkpoint, load_corpus, parse_count,
    parse_relation, read_captions, read_features, relation_between,
    relation_holds, save_checkpoint, tokenize, write_captions, write_corpus,
    write_features,
)


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("A Dog, next to a CAT!") == ["a", "dog", "next", "to", "a", "cat"]

    def test_whitespace_collapse(self):
        assert tokenize("  two   dogs ") == ["two", "dogs"]


class TestRelationSemantics:
    def test_horizontal_pair(self):
        a = BoundingBox(50, 100, 20, 20)
        b = BoundingBox(150, 100, 20, 20)
        assert relation_between(a, b) == "left"
        assert relation_between(b, a) == "right"

    def test_vertical_pair(self):
        a = BoundingBox(100, 40, 20, 20)
        b = BoundingBox(100, 140, 20, 20)
        assert relation_between(a, b) == "above"
        assert relation_between(b, a) == "below"

    def test_near_pair(self):
        a = BoundingBox(100, 100, 20, 20)
        b = BoundingBox(120, 100, 20, 20)
        assert relation_between(a, b) == "next_to"
        assert relation_between(b, a) == "next_to"

    def test_relation_holds_respects_direction(self):
        scene = Scene("x", 256, 256, "relation", [
            SceneObject("dog", BoundingBox(50, 100, 20, 20)),
            SceneObject("cat", BoundingBox(150, 100, 20, 20)),
        ])
        assert relation_holds(scene, "dog", "left", "cat")
        assert relation_holds(scene, "cat", "right", "dog")
        assert not relation_holds(scene, "dog", "right", "cat")
        assert not relation_holds(scene, "dog", "above", "cat")

    def test_parse_relation(self):
        assert parse_relation(tokenize("a dog to the left of a cat")) == ("dog", "left", "cat")
        assert parse_relation(tokenize("a photo of a cup above a ball")) == ("cup", "above", "ball")
        assert parse_relation(tokenize("a bird next to a lamp")) == ("bird", "next_to", "lamp")
        assert parse_relation(tokenize("two dogs")) is None
        assert parse_relation(tokenize("left of nothing")) is None

    def test_parse_count(self):
        assert parse_count(tokenize("two dogs")) == (2, "dog")
        assert parse_count(tokenize("a photo of three cups")) == (3, "cup")
        assert parse_count(tokenize("a dog above a cat")) is None


class TestVocab:
    def test_roundtrip_template_caption(self):
        records = [CaptionRecord("a", ["a dog to the left of a cat", "two cups"])]
        vocab = build_vocab(records)
        s = "a dog to the left of a cat"
        assert vocab.decode(vocab.encode(s)) == s

    def test_encode_wraps_and_unks(self):
        vocab = build_vocab([CaptionRecord("a", ["a dog"])])
        ids = vocab.encode("a zebra")
        assert ids[0] == BOS_ID and ids[-1] == EOS_ID
        assert ids[2] == UNK_ID

    def test_min_freq_filters(self):
        records = [CaptionRecord("a", ["dog dog rare"])]
        vocab = build_vocab(records, min_freq=2)
        assert "dog" in vocab.token_to_id and "rare" not in vocab.token_to_id

    def test_default_corpus_vocab_small(self):
        corpus = generate_corpus(seed=1, n_scenes=60)
        vocab = build_vocab(list(corpus.captions.values()))
        assert len(vocab) < 60


class TestGenerateCorpus:
    def test_determinism(self):
        a = generate_corpus(seed=3, n_scenes=40)
        b = generate_corpus(seed=3, n_scenes=40)
        for image_id in a.scenes:
            npt.assert_array_equal(a.features[image_id], b.features[image_id])
            assert a.captions[image_id].captions == b.captions[image_id].captions
            assert [o.box for o in a.scenes[image_id].objects] == \
                   [o.box for o in b.scenes[image_id].objects]
        assert a.splits == b.splits

    def test_too_small_rejected(self):
        with pytest.raises(ConfigError):
            generate_corpus(seed=0, n_scenes=5)

    def test_references_consistent_with_geometry(self):
        corpus = generate_corpus(seed=5, n_scenes=80)
        for image_id, scene in corpus.scenes.items():
            for ref in corpus.captions[image_id].captions:
                tokens = tokenize(ref)
                if scene.kind == "relation":
                    c1, rel, c2 = parse_relation(tokens)
                    assert relation_holds(scene, c1, rel, c2), (image_id, ref)
                else:
                    num, cat = parse_count(tokens)
                    assert scene.category_count(cat) == num, (image_id, ref)

    def test_splits_disjoint_and_cover(self):
        corpus = generate_corpus(seed=6, n_scenes=50)
        ids = sorted(corpus.splits["train"] + corpus.splits["val"] + corpus.splits["test"])
        assert ids == sorted(corpus.scenes)
        assert len(set(ids)) == len(ids)

    def test_count_scenes_share_multiplicity(self):
        corpus = generate_corpus(seed=8, n_scenes=120)
        saw = set()
        for scene in corpus.scenes.values():
            if scene.kind != "count":
                continue
            cats = {o.category for o in scene.objects}
            counts = {scene.category_count(c) for c in cats}
            assert len(cats) == 2 and len(counts) == 1
            saw |= counts
        assert saw == {2, 3}

    def test_features_have_no_position_signal(self):
        # Transposing the scene (swap x/y of every box) flips the spatial
        # axis and must break directional captions while the features stay
        # untouched: the relation labels live in the boxes alone.
        corpus = generate_corpus(seed=9, n_scenes=200)
        broken = 0
        total = 0
        for image_id, scene in corpus.scenes.items():
            if scene.kind != "relation":
                continue
            transposed = Scene(
                scene.image_id, scene.width, scene.height, scene.kind,
                [SceneObject(o.category,
                             BoundingBox(o.box.y_center, o.box.x_center, o.box.w, o.box.h))
                 for o in scene.objects])
            total += 1
            ref = corpus.captions[image_id].captions[0]
            c1, rel, c2 = parse_relation(tokenize(ref))
            if not relation_holds(transposed, c1, rel, c2):
                broken += 1
        assert total > 10
        assert broken / total > 0.6  # next_to survives a transpose; directions break
        for image_id in corpus.features:
            assert corpus.features[image_id].shape[1] == corpus.config.d_feature


class TestFeatureFiles:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        record = FeatureRecord(
            "img00042", 256.0, 256.0,
            rng.normal(size=(3, 32)).astype(np.float32),
            [BoundingBox(10, 20, 5, 6), BoundingBox(50, 60, 7, 8), BoundingBox(90, 10, 4, 4)],
        )
        path = str(tmp_path / "x.orf")
        write_features(path, record)
        back = read_features(path)
        assert back.image_id == record.image_id
        npt.assert_array_equal(back.features, record.features)
        assert back.boxes == record.boxes
        write_features(str(tmp_path / "y.orf"), back)
        assert (tmp_path / "x.orf").read_bytes() == (tmp_path / "y.orf").read_bytes()

    def test_wide_detector_features_accepted(self, tmp_path):
        record = FeatureRecord("i", 640.0, 480.0,
                               np.zeros((2, 2048), dtype=np.float32),
                               [BoundingBox(10, 10, 5, 5), BoundingBox(20, 20, 5, 5)])
        path = str(tmp_path / "wide.orf")
        write_features(path, record)
        assert read_features(path).features.shape == (2, 2048)

    def test_truncated_file_reports_offset(self, tmp_path):
        record = FeatureRecord("img", 256.0, 256.0,
                               np.ones((2, 4), dtype=np.float32),
                               [BoundingBox(10, 10, 5, 5), BoundingBox(20, 20, 5, 5)])
        path = str(tmp_path / "t.orf")
        write_features(path, record)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-10])
        with pytest.raises(DataFormatError, match="byte"):
            read_features(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.orf")
        open(path, "wb").write(b"NOPE" + b"\x00" * 20)
        with pytest.raises(DataFormatError, match="magic"):
            read_features(path)


class TestCaptionFiles:
    def test_roundtrip(self, tmp_path):
        path = str(tmp_path / "caps.jsonl")
        records = [CaptionRecord("a", ["two dogs", "a photo of two dogs"]),
                   CaptionRecord("b", ["a cat above a cup"])]
        write_captions(path, records)
        back = read_captions(path)
        assert [(r.image_id, r.captions) for r in back] == \
               [(r.image_id, r.captions) for r in records]

    def test_bad_line(self, tmp_path):
        path = str(tmp_path / "caps.jsonl")
        open(path, "w").write('{"image_id": "a"}\n')
        with pytest.raises(DataFormatError):
            read_captions(path)


class TestCorpusDirectory:
    def test_write_then_load(self, tmp_path):
        corpus = generate_corpus(seed=11, n_scenes=30)
        out = str(tmp_path / "corpus")
        write_corpus(corpus, out)
        loaded = load_corpus(out)
        assert loaded.splits == corpus.splits
        for image_id in corpus.scenes:
            npt.assert_array_equal(loaded.features[image_id], corpus.features[image_id])
            assert loaded.captions[image_id].captions == corpus.captions[image_id].captions
        assert os.path.exists(os.path.join(out, "manifest.json"))
        assert os.path.exists(os.path.join(out, "vocab.json"))


class TestCheckpoints:
    def _model(self, mode="geometric"):
        cfg = config_with_mode(toy_config(vocab_size=20), mode)
        return CaptionModel.init(cfg, seed=1)

    def test_save_load_save_byte_identical(self, tmp_path):
        model = self._model()
        cfg_dict = D.model_checkpoint_config(model.cfg)
        p1 = str(tmp_path / "a.ckpt")
        p2 = str(tmp_path / "b.ckpt")
        save_checkpoint(p1, model.params, cfg_dict)
        params, config = load_checkpoint(p1)
        save_checkpoint(p2, params, config)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_forward_identical_after_roundtrip(self, tmp_path):
        from relcap.data import generate_corpus as gen
        model = self._model()
        corpus = gen(seed=2, n_scenes=12)
        image_id = corpus.splits["train"][0]
        scene = corpus.scenes[image_id]
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model.params, D.model_checkpoint_config(model.cfg))
        params, config = load_checkpoint(path, D.model_checkpoint_config(model.cfg))
        reloaded = CaptionModel(model.cfg, params)
        a = model.encoder_forward(corpus.features[image_id], scene.boxes()).tokens.data
        b = reloaded.encoder_forward(corpus.features[image_id], scene.boxes()).tokens.data
        npt.assert_array_equal(a, b)

    def test_geometric_checkpoint_into_standard_config_names_gate_keys(self, tmp_path):
        model = self._model("geometric")
        path = str(tmp_path / "geo.ckpt")
        save_checkpoint(path, model.params, D.model_checkpoint_config(model.cfg))
        std_cfg = D.model_checkpoint_config(config_with_mode(model.cfg, "standard"))
        with pytest.raises(ConfigError, match="attention_mode"):
            load_checkpoint(path, std_cfg)
        # same mode string but gate params stripped: the key diff is reported
        params, config = load_checkpoint(path)
        stripped = {k: v for k, v in params.items() if not k.endswith(".wg")}
        save_checkpoint(path, stripped, config)
        with pytest.raises(ConfigError, match="wg"):
            load_checkpoint(path, config)

    def test_config_mismatch_reported(self, tmp_path):
        model = self._model()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model.params, D.model_checkpoint_config(model.cfg))
        other = dict(D.model_checkpoint_config(model.cfg), d_model=128)
        with pytest.raises(ConfigError, match="d_model"):
            load_checkpoint(path, other)
