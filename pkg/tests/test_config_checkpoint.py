import numpy as np
import pytest

from tsvkit import checkpoint
from tsvkit.checkpoint import CheckpointError
from tsvkit.config import ConfigError, build, dump, load_config, parse_text, profile, profile_pairs
from tsvkit.pipeline import TsvSystem


class TestConfig:
    def test_default_profile_values(self):
        cfg = profile("default")
        assert cfg.attention.kernels == (20, 80, 160)
        assert cfg.scheme == "FA" and cfg.enroll_mode == "attended"
        assert [p.lr for p in cfg.plans] == [1e-3, 1e-4, 1e-4, 1e-5]
        assert cfg.plans[0].segment == 32000
        assert (cfg.weights.alpha, cfg.weights.beta, cfg.weights.gamma, cfg.weights.eta) == (0.1, 0.1, 10.0, 10.0)

    def test_toy_includes_default(self):
        toy = profile("toy")
        assert toy.attention.n_filters == 32
        assert toy.weights == profile("default").weights

    @pytest.mark.parametrize("name", ["default", "toy"])
    def test_dump_round_trip(self, name):
        cfg = profile(name, scheme="t", seed=7)
        again = build(dict(parse_text(dump(cfg))))
        assert again == cfg
        assert dump(again) == dump(cfg)

    @pytest.mark.parametrize("key,value,match", [
        ("scheme", "x", "scheme"),
        ("attention.n_filters", "0", "n_filters"),
        ("attention.n_filters", "3.5", "integer"),
        ("loss.alpha", "1.5", "alpha"),
        ("train.epochs", "1,2", "train.epochs"),
        ("train.snr_min", "9", "snr_min"),
        ("train.single_fraction", "1.5", "single_fraction"),
        ("corpus.n_eval_speakers", "2", "evaluation speakers"),
        ("enroll_mode", "sideways", "enroll_mode"),
        ("bogus.key", "1", "unknown"),
    ])
    def test_rejects(self, key, value, match):
        with pytest.raises(ConfigError, match=match):
            build(profile_pairs("toy"), {key: value})

    def test_direct_enrollment_needs_waveform_scheme(self):
        with pytest.raises(ConfigError, match="direct"):
            profile("toy", scheme="r", enroll_mode="direct")
        assert profile("toy", scheme="f", enroll_mode="direct").enroll_mode == "direct"

    def test_file_include_and_cycle(self, tmp_path):
        (tmp_path / "a.cfg").write_text("include = toy\nseed = 3\n")
        assert load_config(tmp_path / "a.cfg").seed == 3
        (tmp_path / "b.cfg").write_text("include = c.cfg\n")
        (tmp_path / "c.cfg").write_text("include = b.cfg\n")
        with pytest.raises(ConfigError, match="cycle"):
            load_config(tmp_path / "b.cfg")
        (tmp_path / "d.cfg").write_text("seed 3\n")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "d.cfg")

    def test_digest_tracks_architecture_only(self):
        base = profile("toy")
        assert profile("toy", train__epochs="1,1,1,1").digest() == base.digest()
        assert profile("toy", scheme="f").digest() != base.digest()
        assert len(base.digest()) == 32


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        cfg = profile("toy")
        system = TsvSystem.build(cfg)
        checkpoint.save(tmp_path / "a.ckpt", system.state(), cfg.digest())
        state = checkpoint.load(tmp_path / "a.ckpt", cfg.digest())
        other = TsvSystem.build(profile("toy", seed=5))
        other.load_state(state)
        checkpoint.save(tmp_path / "b.ckpt", other.state(), cfg.digest())
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        for k, v in system.state().items():
            assert v.tobytes() == state[k].tobytes()

    def test_special_values_survive(self):
        state = {"w": np.array([[np.nan, -0.0], [np.inf, 5e-324]]), "s": np.array(1.5)}
        back, _ = checkpoint.decode(checkpoint.encode(state, b"\0" * 32))
        assert back["w"].tobytes() == state["w"].tobytes() and back["s"].shape == ()

    def test_corruption(self):
        blob = checkpoint.encode({"w": np.ones(3)}, b"\1" * 32)
        with pytest.raises(CheckpointError, match="different model"):
            checkpoint.decode(blob, b"\2" * 32)
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint.decode(blob[:-1])
        with pytest.raises(CheckpointError, match="trailing"):
            checkpoint.decode(blob + b"\0")
        with pytest.raises(CheckpointError, match="TSV1"):
            checkpoint.decode(b"XXXX" + blob[4:])
        with pytest.raises(CheckpointError):
            checkpoint.encode({"w": np.ones(1)}, b"short")

    def test_load_rejects_missing_or_misshaped_parameter(self):
        system = TsvSystem.build(profile("toy"))
        state = system.state()
        name = sorted(state)[0]
        with pytest.raises((KeyError, ValueError)):
            system.load_state({k: v for k, v in state.items() if k != name})
        with pytest.raises(ValueError):
            system.load_state({**state, name: np.zeros(state[name].size + 1)})
