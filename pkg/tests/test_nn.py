"""Layer tests: LSTM cells, BLSTM, dropout, maxout, CBP, init, checkpoints."""

import numpy as np
import numpy.testing as npt
import pytest

from vidlang import nn, tensor as T
from vidlang.errors import DimensionError, FormatError, UsageError
from vidlang.tensor import Tensor

from conftest import finite_diff, rel_err


def zeroed(params: nn.LstmParams) -> nn.LstmParams:
    for name, t in params.named("x").items():
        t.data = np.zeros_like(t.data)
        if "ln_gain" in name:
            t.data += 1.0
    return params


class TestLstmStep:
    def test_all_zero_gives_zero_state(self, f64):
        params = zeroed(nn.make_lstm(4, 4, seed=0, layer_norm=True))
        state = nn.initial_state(params)
        out = nn.lstm_step(params, Tensor(np.zeros(4)), state)
        npt.assert_allclose(out.top.data, np.zeros(4))
        npt.assert_allclose(out.c[0].data, np.zeros(4))

    def test_gradient_check_single_cell(self, f64):
        params = nn.make_lstm(5, 8, seed=1, layer_norm=True, forget_bias=0.5)
        x = Tensor(np.random.default_rng(2).standard_normal(5), requires_grad=True)
        w = Tensor(np.random.default_rng(3).standard_normal(8))
        named = {"x": x, **params.named("lstm")}

        def f():
            state = nn.initial_state(params)
            out = nn.lstm_step(params, x, state)
            return T.tsum(T.mul(T.add(out.top, out.c[0]), w))

        report = T.grad_check(f, named, step=1e-5, tolerance=1e-4)
        assert report.passed, str(report)

    def test_saturated_forget_gate_carries_memory(self, f64):
        params = nn.make_lstm(3, 3, seed=4, layer_norm=False, forget_bias=1e6)
        c_prev = Tensor(np.array([1.0, -2.0, 0.5]))
        h_prev = Tensor(np.zeros(3))
        x = Tensor(np.random.default_rng(5).standard_normal(3))
        state = nn.LstmState([h_prev], [c_prev])
        out = nn.lstm_step(params, x, state)
        # f == 1 at saturation, so c == c_prev + i * g; verify by recomputing.
        cell = params.cells[0]
        z = x.data @ cell.w_in.data + h_prev.data @ cell.w_rec.data + cell.bias.data
        i = 1 / (1 + np.exp(-z[:3]))
        g = np.tanh(z[9:12])
        npt.assert_allclose(out.c[0].data, c_prev.data + i * g, atol=1e-9)

    def test_layer_norm_block_statistics(self, f64):
        params = nn.make_lstm(16, 16, seed=6, layer_norm=True)
        x = Tensor(np.random.default_rng(7).standard_normal(16) * 2)
        state = nn.LstmState(
            [Tensor(np.random.default_rng(8).standard_normal(16))],
            [Tensor(np.zeros(16))],
        )
        collected: list = []
        nn.lstm_step(params, x, state, collect=collected)
        assert collected, "expected normalized pre-activation blocks"
        for blocks in collected:
            mean = blocks.data.mean(axis=-1)
            var = blocks.data.var(axis=-1)
            npt.assert_allclose(mean, 0.0, atol=1e-5)
            npt.assert_allclose(var, 1.0, atol=1e-3)

    def test_stacked_depth_two_runs(self, f64):
        params = nn.make_lstm(4, 6, seed=9, depth=2)
        out = nn.lstm_step(params, Tensor(np.ones(4)), nn.initial_state(params))
        assert len(out.h) == 2
        assert out.top.shape == (6,)

    def test_input_width_mismatch(self, f64):
        params = nn.make_lstm(4, 4, seed=10)
        with pytest.raises(DimensionError):
            nn.lstm_step(params, Tensor(np.zeros(5)), nn.initial_state(params))


class TestBlstm:
    def make(self, seed, size=4):
        return nn.make_lstm(size, size, seed=seed, layer_norm=True)

    def test_length_one_matches_single_steps(self, f64):
        fwd, bwd = self.make(11), self.make(12)
        x = Tensor(np.random.default_rng(13).standard_normal(4))
        h_f, h_b = nn.blstm_run(fwd, bwd, [x], nn.initial_state(fwd), nn.initial_state(bwd))
        npt.assert_allclose(h_f[0].data, nn.lstm_step(fwd, x, nn.initial_state(fwd)).top.data)
        npt.assert_allclose(h_b[0].data, nn.lstm_step(bwd, x, nn.initial_state(bwd)).top.data)

    def test_reversed_input_swaps_roles(self, f64):
        shared = self.make(14)
        other = self.make(15)
        rng = np.random.default_rng(16)
        xs = [Tensor(rng.standard_normal(4)) for _ in range(5)]
        h_f, _ = nn.blstm_run(shared, other, xs, nn.initial_state(shared), nn.initial_state(other))
        _, h_b_rev = nn.blstm_run(
            other, shared, xs[::-1], nn.initial_state(other), nn.initial_state(shared)
        )
        for t in range(5):
            npt.assert_allclose(h_b_rev[t].data, h_f[4 - t].data, atol=1e-12)

    def test_directions_are_independent(self, f64):
        fwd, bwd = self.make(17), self.make(18)
        rng = np.random.default_rng(19)
        xs = [Tensor(rng.standard_normal(4)) for _ in range(3)]
        h_f1, _ = nn.blstm_run(fwd, bwd, xs, nn.initial_state(fwd), nn.initial_state(bwd))
        zeroed(bwd)
        h_f2, h_b2 = nn.blstm_run(fwd, bwd, xs, nn.initial_state(fwd), nn.initial_state(bwd))
        for a, b in zip(h_f1, h_f2):
            npt.assert_array_equal(a.data, b.data)
        npt.assert_allclose(h_b2[0].data, np.zeros(4))

    def test_lengths_match_input(self, f64):
        fwd, bwd = self.make(20), self.make(21)
        for t_len in (1, 2, 6):
            xs = [Tensor(np.zeros(4)) for _ in range(t_len)]
            h_f, h_b = nn.blstm_run(fwd, bwd, xs, nn.initial_state(fwd), nn.initial_state(bwd))
            assert len(h_f) == len(h_b) == t_len

    def test_empty_sequence_rejected(self, f64):
        fwd, bwd = self.make(22), self.make(23)
        with pytest.raises(UsageError):
            nn.blstm_run(fwd, bwd, [], nn.initial_state(fwd), nn.initial_state(bwd))

    def test_gradient_check_both_directions(self, f64):
        fwd = nn.make_lstm(3, 3, seed=24)
        bwd = nn.make_lstm(3, 3, seed=25)
        rng = np.random.default_rng(26)
        xs = [Tensor(rng.standard_normal(3), requires_grad=True) for _ in range(3)]
        w = Tensor(rng.standard_normal(3))
        named = {**fwd.named("fwd"), **bwd.named("bwd")}
        named.update({f"x{t}": x for t, x in enumerate(xs)})

        def f():
            h_f, h_b = nn.blstm_run(fwd, bwd, xs, nn.initial_state(fwd), nn.initial_state(bwd))
            total = T.tsum(T.mul(h_f[-1], w))
            for t in range(3):
                total = T.add(total, T.tsum(T.mul(h_b[t], w)))
            return total

        report = T.grad_check(f, named, step=1e-5, tolerance=1e-4)
        assert report.passed, str(report)


class TestDropout:
    def test_inference_is_bit_identical(self):
        x = Tensor(np.random.default_rng(27).standard_normal(100))
        out = nn.dropout_apply(x, 0.2, training=False, rng=0)
        npt.assert_array_equal(out.data, x.data)

    def test_rate_zero_identity(self):
        x = Tensor(np.ones(10))
        out = nn.dropout_apply(x, 0.0, training=True, rng=0)
        npt.assert_array_equal(out.data, x.data)

    def test_survivor_fraction(self):
        x = Tensor(np.ones(100_000))
        out = nn.dropout_apply(x, 0.2, training=True, rng=np.random.default_rng(28))
        frac = np.count_nonzero(out.data) / x.size
        assert abs(frac - 0.8) < 0.01
        survivors = out.data[out.data != 0]
        npt.assert_allclose(survivors, 1 / 0.8)

    def test_invalid_rate(self):
        with pytest.raises(UsageError):
            nn.dropout_apply(Tensor(np.ones(3)), 1.0, training=True, rng=0)


class TestMaxout:
    def test_identical_pieces_idempotent(self, f64):
        p = nn.make_maxout(4, 3, k=2, seed=29)
        w, b = p.pieces[0]
        p.pieces[1] = (Tensor(w.data.copy(), requires_grad=True), Tensor(b.data.copy(), requires_grad=True))
        x = Tensor(np.random.default_rng(30).standard_normal(4))
        out = nn.maxout(x, p)
        npt.assert_allclose(out.data, x.data @ w.data + b.data)

    def test_identity_and_negation_gives_abs(self, f64):
        eye = np.eye(3)
        p = nn.MaxoutParams(
            [
                (Tensor(eye, requires_grad=True), Tensor(np.zeros(3), requires_grad=True)),
                (Tensor(-eye, requires_grad=True), Tensor(np.zeros(3), requires_grad=True)),
            ]
        )
        x = np.array([1.0, -2.0, 0.5])
        npt.assert_allclose(nn.maxout(Tensor(x), p).data, np.abs(x))

    def test_gradient_check_off_ties(self, f64):
        p = nn.make_maxout(4, 3, k=2, seed=31)
        x = Tensor(np.random.default_rng(32).standard_normal(4), requires_grad=True)
        w = Tensor(np.random.default_rng(33).standard_normal(3))
        named = {"x": x, **p.named("mo")}

        def f():
            return T.tsum(T.mul(nn.maxout(x, p), w))

        report = T.grad_check(f, named, step=1e-6, tolerance=1e-5)
        assert report.passed, str(report)

    def test_single_piece_rejected(self):
        with pytest.raises(UsageError):
            nn.make_maxout(4, 3, k=1, seed=34)


class TestCompactBilinear:
    def collision_free_sketch(self, da=4, db=4):
        d_out = da * db
        return nn.SketchParams(
            h1=np.arange(da),
            s1=np.ones(da, dtype=np.int64),
            h2=np.arange(db) * da,
            s2=np.ones(db, dtype=np.int64),
            d_out=d_out,
        )

    def test_zero_inputs_zero_output(self, f64):
        sk = nn.make_sketch(8, 8, 32, seed=35)
        out = nn.compact_bilinear(Tensor(np.zeros(8)), Tensor(np.zeros(8)), sk)
        npt.assert_allclose(out.data, np.zeros(32), atol=1e-12)

    def test_collision_free_inner_product_exact(self, f64):
        sk = self.collision_free_sketch()
        rng = np.random.default_rng(36)
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        a2, b2 = rng.standard_normal(4), rng.standard_normal(4)
        lhs = np.dot(
            nn.compact_bilinear(Tensor(a), Tensor(b), sk).data,
            nn.compact_bilinear(Tensor(a2), Tensor(b2), sk).data,
        )
        rhs = np.dot(a, a2) * np.dot(b, b2)
        assert abs(lhs - rhs) < 1e-5

    def test_bilinearity(self, f64):
        sk = nn.make_sketch(6, 6, 24, seed=37)
        rng = np.random.default_rng(38)
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        one = nn.compact_bilinear(Tensor(2.5 * a), Tensor(b), sk).data
        two = 2.5 * nn.compact_bilinear(Tensor(a), Tensor(b), sk).data
        npt.assert_allclose(one, two, atol=1e-6)

    def test_monte_carlo_unbiasedness(self, f64):
        rng = np.random.default_rng(39)

        def unit(v):
            return v / np.linalg.norm(v)

        a = unit(rng.standard_normal(16))
        b = unit(rng.standard_normal(16))
        a2 = unit(0.8 * a + 0.2 * rng.standard_normal(16))
        b2 = unit(0.8 * b + 0.2 * rng.standard_normal(16))
        target = np.dot(a, a2) * np.dot(b, b2)
        estimates = []
        for seed in range(1000):
            sk = nn.make_sketch(16, 16, 512, seed=seed)
            lhs = nn.compact_bilinear(Tensor(a), Tensor(b), sk).data
            rhs = nn.compact_bilinear(Tensor(a2), Tensor(b2), sk).data
            estimates.append(np.dot(lhs, rhs))
        mean = np.mean(estimates)
        assert abs(mean - target) <= 0.05 * abs(target), (mean, target)

    def test_gradients_flow_to_both_inputs(self, f64):
        sk = nn.make_sketch(5, 5, 16, seed=40)
        a = Tensor(np.random.default_rng(41).standard_normal(5), requires_grad=True)
        b = Tensor(np.random.default_rng(42).standard_normal(5), requires_grad=True)
        w = Tensor(np.random.default_rng(43).standard_normal(16))
        with T.Tape() as tape:
            loss = T.tsum(T.mul(nn.compact_bilinear(a, b, sk), w))
        T.backward(tape, loss)

        def f():
            return T.tsum(T.mul(nn.compact_bilinear(a, b, sk), w)).item()

        fds = finite_diff(f, [a.data, b.data])
        assert rel_err(a.grad, fds[0]) < 1e-6
        assert rel_err(b.grad, fds[1]) < 1e-6


class TestXavier:
    def test_one_by_one_bound(self):
        for seed in range(50):
            v = nn.xavier_init((1, 1), seed=seed).item()
            assert abs(v) <= np.sqrt(3.0)

    def test_same_seed_identical(self):
        a = nn.xavier_init((7, 9), seed=44)
        b = nn.xavier_init((7, 9), seed=44)
        npt.assert_array_equal(a.data, b.data)

    def test_sample_variance(self):
        t = nn.xavier_init((100, 100), seed=45)
        expected = 2.0 / (100 + 100)
        assert abs(t.data.var() - expected) <= 0.1 * expected


class TestCheckpoint:
    def params(self):
        rng = np.random.default_rng(46)
        return {
            "enc.w": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
            "enc.b": Tensor(rng.standard_normal(4), requires_grad=True),
            "scalar": Tensor(np.float64(2.5), requires_grad=True),
        }

    def test_round_trip(self, tmp_path):
        params = self.params()
        path = tmp_path / "model.ctsn"
        nn.save_checkpoint(params, path)
        loaded = nn.load_checkpoint(path)
        assert set(loaded) == set(params)
        for name, t in params.items():
            npt.assert_array_equal(loaded[name], t.data.astype(np.float32))

    def test_load_into_assigns(self, tmp_path):
        params = self.params()
        path = tmp_path / "model.ctsn"
        nn.save_checkpoint(params, path)
        fresh = {k: Tensor(np.zeros(v.shape)) for k, v in params.items()}
        nn.load_into(fresh, path)
        npt.assert_allclose(fresh["enc.b"].data, params["enc.b"].data.astype(np.float32))

    def test_bad_magic_and_truncation(self, tmp_path):
        path = tmp_path / "bad.ctsn"
        path.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(FormatError):
            nn.load_checkpoint(path)
        params = self.params()
        good = tmp_path / "good.ctsn"
        nn.save_checkpoint(params, good)
        data = good.read_bytes()
        trunc = tmp_path / "trunc.ctsn"
        trunc.write_bytes(data[: len(data) - 5])
        with pytest.raises(FormatError) as exc:
            nn.load_checkpoint(trunc)
        assert exc.value.offset is not None
