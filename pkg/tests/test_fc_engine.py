import numpy as np
import pytest

from assocpim import fc_engine as fc
from assocpim.acsr import SparseMatrix, build_field_map, encode_acsr, load_image, read_flags
from assocpim.ap_core import ApState
from assocpim.fc_engine import ActivationList, LayerConfig
from assocpim.microcode import peek_field, poke_field
from oracles import dense_layer_oracle


def toy_cfg(**kw):
    m = SparseMatrix.from_dense([[0, 2, 0], [1, 0, 3]], bits=4)
    return LayerConfig.from_matrix(m, 4, **kw)


def reduce_blocks(block_values, k=40, long_step=16):
    """AP holding the given blocks packed back to back, C preloaded; returns (ap, fmap, image, rounds)."""
    n_cols = max(len(b) for b in block_values)
    rows, cols, vals = [], [], []
    for r, blk in enumerate(block_values):
        for c, _ in enumerate(blk):
            rows.append(r), cols.append(c), vals.append(1)
    m = SparseMatrix(len(block_values), n_cols, rows, cols, vals, bits=2)
    img = encode_acsr(m)
    fmap = build_field_map(n_cols, 2, 2, img.max_block_len, k=k)
    ap = ApState(img.depth, fmap.width, long_step)
    load_image(ap, img, fmap)
    poke_field(ap, fmap.c, [v for blk in block_values for v in blk], signed=True)
    rounds = fc.soft_reduce(ap, fmap)
    return ap, fmap, img, rounds


class TestBroadcast:
    def test_single(self):
        cfg = toy_cfg()
        ap = fc.prepare_ap(cfg)
        fc.broadcast_activations(ap, cfg.fmap, ActivationList((1,), (5,), 4))
        assert peek_field(ap, cfg.fmap.b).tolist() == [5, 0, 0]

    def test_empty(self):
        cfg = toy_cfg()
        ap = fc.prepare_ap(cfg)
        poke_field(ap, cfg.fmap.b, [3, 3, 3])
        before = ap.cycles
        fc.broadcast_activations(ap, cfg.fmap, ActivationList(bits=4))
        assert peek_field(ap, cfg.fmap.b).tolist() == [0, 0, 0]
        assert ap.cycles - before == 1

    def test_one_cycle_reaches_all_rows(self):
        m = SparseMatrix.from_dense([[0, 1], [0, 2], [3, 4]], bits=4)
        cfg = LayerConfig.from_matrix(m, 4)
        ap = fc.prepare_ap(cfg)
        before = ap.cycles
        fc.broadcast_activations(ap, cfg.fmap, ActivationList((1,), (9,), 4))
        assert ap.cycles - before == 2
        assert peek_field(ap, cfg.fmap.b).tolist() == [9, 9, 0, 9]


class TestMultiplyStage:
    def test_products(self):
        m = SparseMatrix.from_dense([[5, -3, 7]], bits=4)
        cfg = LayerConfig.from_matrix(m, 4)
        ap = fc.prepare_ap(cfg)
        fc.broadcast_activations(ap, cfg.fmap, ActivationList((0, 1), (3, 15), 4))
        fc.multiply_stage(ap, cfg.fmap)
        assert peek_field(ap, cfg.fmap.c, True).tolist() == [15, -45, 0]

    def test_signed_acts(self):
        m = SparseMatrix.from_dense([[-8, 7, -1]], bits=4)
        cfg = LayerConfig.from_matrix(m, 4, act_signed=True)
        ap = fc.prepare_ap(cfg)
        fc.broadcast_activations(ap, cfg.fmap, ActivationList((0, 1, 2), (-8, -8, 7), 4, True))
        fc.multiply_stage(ap, cfg.fmap, True)
        assert peek_field(ap, cfg.fmap.c, True).tolist() == [64, -56, -7]

    def test_random_against_per_pu_products(self):
        rng = np.random.default_rng(3)
        dense = rng.integers(-128, 128, size=(16, 32))
        dense[rng.random(dense.shape) < 0.6] = 0
        m = SparseMatrix.from_dense(dense, bits=8)
        cfg = LayerConfig.from_matrix(m, 8)
        acts = ActivationList.from_dense(rng.integers(0, 256, size=32), bits=8)
        ap = fc.prepare_ap(cfg)
        fc.broadcast_activations(ap, cfg.fmap, acts)
        fc.multiply_stage(ap, cfg.fmap)
        a = acts.to_dense(32)
        expect = [int(w) * a[c] for w, c in zip(cfg.image.values, cfg.image.col_index)]
        assert peek_field(ap, cfg.fmap.c, True).tolist() == expect


class TestSoftReduce:
    def test_five_block(self):
        ap, fmap, img, rounds = reduce_blocks([[3, 1, 4, 1, 5]])
        assert rounds == 3
        assert peek_field(ap, fmap.c, True)[0] == 14
        assert read_flags(ap, fmap, 1) == ["11"]

    def test_singleton_untouched(self):
        ap, fmap, img, rounds = reduce_blocks([[9], [2, 3]])
        c = peek_field(ap, fmap.c, True)
        assert c[0] == 9 and c[1] == 5 and rounds == 1

    def test_all_singletons_zero_rounds(self):
        ap, fmap, _, rounds = reduce_blocks([[1], [2], [3]])
        assert rounds == 0 and ap.cycles == 3 + 2

    @pytest.mark.parametrize("L", [1, 2, 3, 7, 16, 17, 33])
    def test_sentinels(self, L):
        blocks = [[(1 << 20) * (i + 1) for i in range(3)], [i + 1 for i in range(L)], [(1 << 30) + i for i in range(5)]]
        ap, fmap, img, _ = reduce_blocks(blocks)
        c = peek_field(ap, fmap.c, True)
        starts = img.block_starts.tolist()
        assert [int(c[s]) for s in starts] == [sum(b) for b in blocks]

    def test_cycle_formula(self):
        for L, step in [(5, 16), (40, 4), (64, 2)]:
            ap, fmap, img, _ = reduce_blocks([list(range(1, L + 1))], k=20, long_step=step)
            assert ap.cycles - img.depth == fc.reduce_cycles(20, L, step)


class TestActivation:
    def test_relu(self):
        cfg = toy_cfg()
        ap = fc.prepare_ap(cfg)
        poke_field(ap, cfg.fmap.c, [-7, 7, 0], signed=True)
        before = ap.cycles
        fc.relu_stage(ap, cfg.fmap)
        assert peek_field(ap, cfg.fmap.c, True).tolist() == [0, 7, 0]
        assert ap.cycles - before == 1

    def test_lut_clamps(self):
        cfg = toy_cfg(activation="sigmoid")
        k = cfg.fmap.k
        ap = ApState(6, cfg.fmap.width)
        vals = [-(1 << (k - 1)), -129, -128, 0, 127, (1 << (k - 1)) - 1]
        poke_field(ap, cfg.fmap.c, vals, signed=True)
        fc.apply_lut_activation(ap, cfg.fmap, cfg.lut, cfg.lut_window)
        expect = [cfg.lut[min(max(v, -128), 127)] for v in vals]
        assert peek_field(ap, cfg.fmap.c, True).tolist() == expect
        assert ap.cycles == fc.lut_activation_cycles(k, 8)

    def test_table_values(self):
        t = fc.make_activation_table("sigmoid")
        assert t[0] == 64 and t[127] == 128 and t[-128] == 0
        assert fc.make_activation_table("tanh")[0] == 0


class TestExtract:
    def test_requantize(self):
        assert fc.requantize(36, 4, 8, False) == 2
        assert fc.requantize(40, 4, 8, False) == 2  # 2.5 -> 2
        assert fc.requantize(56, 4, 8, False) == 4  # 3.5 -> 4
        assert fc.requantize(-40, 4, 8, True) == -2
        assert fc.requantize(1000, 0, 8, False) == 255
        assert fc.requantize(-5, 0, 8, False) == 0

    def test_nonzero_only(self):
        cfg = toy_cfg()
        ap = fc.prepare_ap(cfg)
        poke_field(ap, cfg.fmap.c, [14, 0, 99], signed=True)
        acts, raw = fc.extract_activations(ap, cfg.fmap, cfg.image, 0, 8, False)
        assert acts.as_dict() == {0: 14} and raw == {0: 14, 1: 0}

    def test_all_zero(self):
        cfg = toy_cfg()
        ap = fc.prepare_ap(cfg)
        acts, _ = fc.extract_activations(ap, cfg.fmap, cfg.image, 0, 8, False)
        assert acts.nnz == 0


class TestLayer:
    def test_toy(self):
        cfg = toy_cfg()
        acts = ActivationList((0, 1, 2), (5, 4, 2), 4)
        res = fc.run_layer(fc.prepare_ap(cfg), cfg, acts)
        assert res.accumulators == {0: 8, 1: 11}
        assert res.outputs.as_dict() == {0: 8, 1: 11}

    def test_random_128(self):
        rng = np.random.default_rng(11)
        dense = rng.integers(-128, 128, size=(128, 128))
        dense[rng.random(dense.shape) >= 0.1] = 0
        a = rng.integers(1, 256, size=128)
        a[rng.random(128) >= 0.3] = 0
        cfg = LayerConfig.from_matrix(SparseMatrix.from_dense(dense, bits=8), 8, activation="none", out_bits=32, out_signed=True)
        acts = ActivationList.from_dense(a, bits=8)
        sim = fc.run_layer(fc.prepare_ap(cfg), cfg, acts)
        ref = fc.reference_layer(cfg, acts)
        assert sim.accumulators == ref.accumulators
        assert sim.outputs == ref.outputs
        oracle = dense_layer_oracle(dense, a)
        assert all(sim.accumulators[r] == oracle[r] for r in sim.accumulators)

    def test_twice_on_same_array(self):
        cfg = toy_cfg()
        acts = ActivationList((0, 2), (3, 1), 4)
        ap = fc.prepare_ap(cfg)
        r1 = fc.run_layer(ap, cfg, acts)
        r2 = fc.run_layer(ap, cfg, acts)
        assert r1.outputs == r2.outputs
        assert {k: v.cycles for k, v in r1.report.items()} == {k: v.cycles for k, v in r2.report.items()}

    def test_measured_matches_closed_forms(self):
        rng = np.random.default_rng(5)
        for act in ("relu", "none", "sigmoid"):
            dense = rng.integers(-8, 8, size=(20, 30))
            dense[rng.random(dense.shape) < 0.7] = 0
            cfg = LayerConfig.from_matrix(SparseMatrix.from_dense(dense, bits=4), 4, activation=act)
            acts = ActivationList.from_dense(rng.integers(0, 16, size=30), bits=4)
            res = fc.run_layer(fc.prepare_ap(cfg), cfg, acts)
            assert {k: v.cycles for k, v in res.report.items()} == fc.layer_cycles(cfg, acts.nnz)

    def test_lut_multiply_mode(self):
        m = SparseMatrix.from_dense([[3, 0, -2], [0, 5, 5]], bits=4)
        cfg = LayerConfig.from_matrix(m, 4, multiply="lut", act_codebook=(1, 6, 9))
        acts = ActivationList((0, 1, 2), (6, 9, 1), 4)
        res = fc.run_layer(fc.prepare_ap(cfg), cfg, acts)
        assert res.accumulators == {0: 16, 1: 50}
        assert res.report["multiply"].cycles == fc.layer_cycles(cfg, 3)["multiply"]

    def test_bad_activation_index(self):
        cfg = toy_cfg()
        with pytest.raises(fc.LayerConfigError):
            fc.run_layer(fc.prepare_ap(cfg), cfg, ActivationList((3,), (1,), 4))

    def test_signedness_mismatch(self):
        cfg = toy_cfg()
        with pytest.raises(fc.LayerConfigError):
            fc.run_layer(fc.prepare_ap(cfg), cfg, ActivationList((0,), (1,), 4, True))


class TestNetwork:
    def test_two_layers(self):
        rng = np.random.default_rng(2)
        d1 = rng.integers(-8, 8, size=(12, 10))
        d2 = rng.integers(-8, 8, size=(6, 12))
        l1 = LayerConfig.from_matrix(SparseMatrix.from_dense(d1, bits=4), 4, shift=3)
        l2 = LayerConfig.from_matrix(SparseMatrix.from_dense(d2, bits=4), 4, activation="none", shift=0, out_bits=16, out_signed=True)
        x = ActivationList.from_dense(rng.integers(0, 16, size=10), bits=4)
        sim = fc.run_network([l1, l2], x)
        ref = fc.reference_network([l1, l2], x)
        assert sim.outputs == ref.outputs
        assert [l.accumulators for l in sim.layers] == [l.accumulators for l in ref.layers]
        assert sim.load.cycles == l1.image.depth + l2.image.depth

    def test_empty_input(self):
        cfg = toy_cfg()
        res = fc.run_network([cfg], ActivationList(bits=4))
        assert res.outputs.nnz == 0

    def test_chain_mismatch(self):
        with pytest.raises(fc.LayerConfigError):
            fc.check_chain([toy_cfg(), toy_cfg()])

    def test_nnz_effective(self):
        cfg = toy_cfg()
        assert fc.nnz_effective(cfg, ActivationList((0, 1), (1, 1), 4)) == 2
