"""Network-level contracts: build, shapes, counting, checkpoints, benchmark."""

import numpy as np
import pytest

from dwrseg import network as N
from dwrseg.engine import ConvSpec, FormatError, ShapeError, Tape
from dwrseg.network import NetworkConfig, StageSpec


@pytest.fixture(scope="module")
def tiny():
    cfg = N.preset("tiny", num_classes=4)
    return cfg, N.build(cfg, rng_seed=0)


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        cfg = N.preset("tiny", num_classes=4)
        a = N.build(cfg, rng_seed=7)
        b = N.build(cfg, rng_seed=7)
        assert a.names() == b.names()
        for name, arr in a.items():
            np.testing.assert_array_equal(arr, b[name])

    def test_different_seeds_differ(self):
        cfg = N.preset("tiny", num_classes=4)
        a = N.build(cfg, rng_seed=1)
        b = N.build(cfg, rng_seed=2)
        assert any(not np.array_equal(arr, b[name]) for name, arr in a.items())

    def test_stage_list_matches_reference_table(self):
        for variant, repeats in (("B", (7, 3, 3)), ("L", (8, 8, 3))):
            cfg = N.preset(variant)
            assert cfg.stem_channels == 64
            assert tuple(s.repeats for s in cfg.stages) == repeats
            assert tuple(s.channels for s in cfg.stages) == (64, 128, 128)
            assert tuple(s.kind for s in cfg.stages) == ("sir", "dwr", "dwr")
            assert (cfg.stages[1].branch_count, cfg.stages[2].branch_count) == (2, 3)
            assert cfg.decoder_width == 320
            assert cfg.head_width == 128

    def test_block_count_deltas(self):
        cfg = N.preset("B", deltas=(1, -1, 0))
        assert tuple(s.repeats for s in cfg.stages) == (8, 2, 3)

    def test_bn_init(self, tiny):
        _, store = tiny
        np.testing.assert_array_equal(store["s2.0.rr.bn.gamma"],
                                      np.ones_like(store["s2.0.rr.bn.gamma"]))
        np.testing.assert_array_equal(store["s2.0.rr.bn.beta"],
                                      np.zeros_like(store["s2.0.rr.bn.beta"]))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ShapeError):
            N.preset("XL")


class TestForward:
    def test_shape_contract_b_and_l(self):
        x = np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)
        for variant in ("B", "L"):
            cfg = N.preset(variant, num_classes=19)
            store = N.build(cfg, rng_seed=3)
            logits, taps = N.infer(store, cfg, x)
            assert logits.shape == (1, 19, 64, 64)
            assert taps["s2"].shape == (1, 64, 8, 8)
            assert taps["s3"].shape == (1, 128, 4, 4)
            assert taps["s4"].shape == (1, 128, 2, 2)

    def test_eval_forward_is_pure(self, tiny):
        cfg, store = tiny
        x = np.full((1, 3, 64, 64), 0.5, np.float32)
        a, _ = N.infer(store, cfg, x)
        stats_before = {n: v.copy() for n, v in store.stat_items()}
        b, _ = N.infer(store, cfg, x)
        np.testing.assert_array_equal(a, b)
        for n, v in store.stat_items():
            np.testing.assert_array_equal(v, stats_before[n])

    def test_train_mode_updates_running_stats(self, tiny):
        cfg, _ = tiny
        store = N.build(cfg, rng_seed=5)
        before = store.bn("stem.conv1.bn").running_mean.copy()
        x = np.random.default_rng(1).random((2, 3, 64, 64), dtype=np.float32)
        N.infer(store, cfg, x, mode="train")
        assert not np.array_equal(store.bn("stem.conv1.bn").running_mean, before)

    def test_divisibility_error(self, tiny):
        cfg, store = tiny
        with pytest.raises(ShapeError):
            N.infer(store, cfg, np.zeros((1, 3, 48, 64), np.float32))


class TestCounts:
    def test_conv_param_closed_form(self):
        # 3x3, 16->32, with bias
        assert N.conv_param_count(ConvSpec(16, 32, 3, has_bias=True)) == 4640

    def test_param_targets_b_l(self):
        for variant in ("B", "L"):
            total, _ = N.count_params(N.preset(variant))
            target = N.PARAM_TARGETS[variant]
            assert abs(total - target) / target <= 0.15

    def test_two_block_toy_hand_count(self):
        # stem(8)=800, sir(8, lam=2)=1320, dwr(8,B2)=1124, dwr(8,B3)=1124,
        # decoder bn(24)=48, head(24->8, N=2)=1762; total 6178 (worked by hand)
        cfg = NetworkConfig(
            variant="toy", num_classes=2, stem_channels=8,
            stages=(StageSpec("sir", 1, 8, expansion=2),
                    StageSpec("dwr", 1, 8, branch_count=2),
                    StageSpec("dwr", 1, 8, branch_count=3)),
            head_width=8)
        total, items = N.count_params(cfg)
        assert total == 6178
        groups = N.breakdown_by_group(items)
        assert groups == {"stem": 800, "s2": 1320, "s3": 1124, "s4": 1124,
                          "decoder": 48, "head": 1762}

    def test_store_size_matches_count(self, tiny):
        cfg, store = tiny
        total, _ = N.count_params(cfg)
        assert store.num_params() == total

    def test_mac_closed_form(self):
        from dwrseg.blocks import conv_macs
        assert conv_macs(ConvSpec(192, 128, 1), 8, 8) == 1_572_864

    def test_mac_targets_b_l(self):
        for variant in ("B", "L"):
            total, _ = N.count_macs(N.preset(variant), 512, 1024)
            target = N.MAC_TARGETS[variant]
            assert abs(total - target) / target <= 0.10

    def test_l_strictly_larger_and_ratio(self):
        pb, _ = N.count_params(N.preset("B"))
        pl, _ = N.count_params(N.preset("L"))
        mb, _ = N.count_macs(N.preset("B"), 512, 1024)
        ml, _ = N.count_macs(N.preset("L"), 512, 1024)
        assert pl > pb and ml > mb
        ref_ratio = N.PARAM_TARGETS["L"] / N.PARAM_TARGETS["B"]
        assert abs(pl / pb - ref_ratio) / ref_ratio <= 0.15

    def test_decoder_concat_width(self):
        assert N.preset("B").decoder_width == 320
        assert N.preset("L").decoder_width == 320


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tiny, tmp_path):
        cfg, store = tiny
        p1, p2 = tmp_path / "a.dwck", tmp_path / "b.dwck"
        N.save_checkpoint(store, cfg, p1)
        loaded, cfg2 = N.load_checkpoint(p1)
        N.save_checkpoint(loaded, cfg2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_reload_reproduces_logits(self, tmp_path):
        cfg = N.preset("tiny", num_classes=4)
        store = N.build(cfg, rng_seed=7)
        x = np.random.default_rng(2).random((1, 3, 64, 64), dtype=np.float32)
        ref, _ = N.infer(store, cfg, x)
        path = tmp_path / "c.dwck"
        N.save_checkpoint(store, cfg, path)
        loaded, cfg2 = N.load_checkpoint(path)
        got, _ = N.infer(loaded, cfg2, x)
        np.testing.assert_array_equal(got, ref)

    def test_truncated_rejected(self, tiny, tmp_path):
        cfg, store = tiny
        p = tmp_path / "t.dwck"
        N.save_checkpoint(store, cfg, p)
        p.write_bytes(p.read_bytes()[:-20])
        with pytest.raises(FormatError):
            N.load_checkpoint(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.dwck"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            N.load_checkpoint(p)

    def test_running_stats_round_trip(self, tmp_path):
        cfg = N.preset("tiny", num_classes=4)
        store = N.build(cfg, rng_seed=1)
        x = np.random.default_rng(3).random((2, 3, 32, 32), dtype=np.float32)
        N.infer(store, cfg, x, mode="train")  # perturb running stats
        p = tmp_path / "s.dwck"
        N.save_checkpoint(store, cfg, p)
        loaded, _ = N.load_checkpoint(p)
        for (n1, a), (n2, b) in zip(store.stat_items(), loaded.stat_items()):
            assert n1 == n2
            np.testing.assert_array_equal(a, b)


class TestGradFlow:
    def test_grads_cover_all_params(self, tiny):
        cfg, store = tiny
        x = np.random.default_rng(4).random((1, 3, 64, 64), dtype=np.float32)
        tape = Tape()
        logits, _ = N.forward(store, cfg, x, mode="train", tape=tape)
        grads = N.grads_from_backward(tape, store, logits, np.ones_like(logits.data))
        assert set(grads) == set(store.names())
        nonzero = sum(1 for g in grads.values() if np.abs(g).sum() > 0)
        assert nonzero > 0.9 * len(grads)


class TestBenchmark:
    def test_bench_smoke(self, tiny):
        cfg, store = tiny
        stats = N.benchmark_forward(store, cfg, (1, 3, 32, 32), warmup=1, iters=4)
        assert len(stats["samples_s"]) == 4  # warmup excluded
        assert stats["mean_s"] > 0 and stats["fps"] > 0
        assert stats["recorded_nodes"] == 0  # eval path allocates no grad storage
