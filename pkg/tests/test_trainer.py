import json
import struct

import numpy as np
import pytest

from vlmatch import checkpoint as C
from vlmatch import encoders as E
from vlmatch import tensor as T
from vlmatch import trainer as TR
from vlmatch.errors import DimensionError, FormatError, StateError, ValidationError, VersionError
from vlmatch.seeding import substream
from vlmatch.tensor import Tensor

from conftest import SMALL, jittered


def scalar_params(x0):
    p = E.ModelParams({"g": {"x": Tensor(np.array([x0]), requires_grad=True)}})
    return p, p["g"]["x"]


class TestAdam:
    def test_first_step_is_minus_lr(self):
        p, x = scalar_params(3.0)
        x.grad = np.array([1.0])
        TR.adam_step(p, TR.AdamState(), lr=0.01)
        assert x.data[0] == pytest.approx(3.0 - 0.01, abs=1e-10)

    def test_zero_gradient(self):
        p, x = scalar_params(1.0)
        st = TR.AdamState()
        x.grad = np.array([2.0])
        TR.adam_step(p, st, 0.1)
        m1, v1, before = st.m["g.x"].copy(), st.v["g.x"].copy(), x.data.copy()
        x.grad = np.array([0.0])
        TR.adam_step(p, st, 0.1)
        assert st.m["g.x"][0] == pytest.approx(0.9 * m1[0]) and st.v["g.x"][0] == pytest.approx(0.999 * v1[0])
        # moments still carry the old gradient, so the parameter keeps moving
        assert x.data[0] != before[0]

    def test_zero_gradient_fresh_state_unchanged(self):
        p, x = scalar_params(1.0)
        x.grad = np.array([0.0])
        TR.adam_step(p, TR.AdamState(), 0.1)
        assert x.data[0] == 1.0

    def test_quadratic_trajectory_oracle(self):
        # f(x) = (x - 2)^2, three steps, straight-line Adam
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p, x = scalar_params(0.5)
        st = TR.AdamState()
        ref, m, v = 0.5, 0.0, 0.0
        for t in range(1, 4):
            x.grad = None
            loss = T.sum(T.square(T.add(x, -2.0)))
            T.backward(loss)
            TR.adam_step(p, st, lr, b1, b2, eps)
            g = 2 * (ref - 2)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            assert x.data[0] == pytest.approx(ref, abs=1e-15)

    def test_frozen_untouched_and_missing_grad(self):
        p = E.ModelParams({"a": {"w": Tensor(np.ones(2), requires_grad=True)},
                           "b": {"w": Tensor(np.ones(2), requires_grad=True)}})
        p.freeze("b")
        p["a"]["w"].grad = np.ones(2)
        TR.adam_step(p, TR.AdamState(), 0.5)
        assert np.array_equal(p["b"]["w"].data, np.ones(2))
        p["a"]["w"].grad = None
        with pytest.raises(StateError):
            TR.adam_step(p, TR.AdamState(), 0.5)

    def test_sgd(self):
        p, x = scalar_params(1.0)
        x.grad = np.array([0.5])
        TR.sgd_step(p, 0.2)
        assert x.data[0] == pytest.approx(0.9)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"steps": 0}, {"lr": 0.0}, {"stage": "nope"}, {"batch_size": 1},
                                    {"momentum": 1.0}, {"holdout": 0.0}, {"optimizer": "lion"}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            TR.TrainConfig(**kw)

    def test_roundtrip_and_unknown(self):
        c = TR.TrainConfig(steps=7, lam=0.5)
        assert TR.TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValidationError):
            TR.TrainConfig.from_dict({"stpes": 3})


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        p = jittered(SMALL, seed=4)
        path = C.save_checkpoint(p, tmp_path / "m.vlmt", {"note": "x"})
        q = C.load_checkpoint(path)
        assert q.meta["note"] == "x"
        for (n1, a), (n2, b) in zip(p.named(), q.named()):
            assert n1 == n2 and a.data.tobytes() == b.data.tobytes()

    def test_layout(self, tmp_path):
        p = E.ModelParams({"g": {"w": Tensor(np.array([[1.5, -2.0]]))}})
        buf = C.encode_checkpoint(p, {})
        assert buf[:4] == b"VLMT"
        assert struct.unpack("<I", buf[4:8])[0] == C.VERSION
        assert buf.endswith(struct.pack("<2d", 1.5, -2.0))

    def test_truncated(self, tmp_path):
        buf = C.encode_checkpoint(jittered(SMALL), {})
        for cut in (3, 10, len(buf) // 2, len(buf) - 1):
            path = tmp_path / f"t{cut}.vlmt"
            path.write_bytes(buf[:cut])
            with pytest.raises(FormatError):
                C.load_checkpoint(path)

    def test_bad_magic_and_version(self, tmp_path):
        buf = C.encode_checkpoint(jittered(SMALL), {})
        (tmp_path / "a").write_bytes(b"XXXX" + buf[4:])
        with pytest.raises(FormatError):
            C.load_checkpoint(tmp_path / "a")
        (tmp_path / "b").write_bytes(buf[:4] + struct.pack("<I", 99) + buf[8:])
        with pytest.raises(VersionError):
            C.load_checkpoint(tmp_path / "b")

    def test_load_into_shape_check_before_mutation(self):
        target = jittered(SMALL, 0)
        before = target["vision"]["patch.w"].data.copy()
        other = jittered(E.EncoderConfig(dim=8, layers=1, heads=2, vocab_size=40, max_text_len=8, patch_grid=2,
                                         patch_dim=4, proj_dim=4, mlp_ratio=2), 1)
        # vision shapes agree, text does not: nothing may be copied
        with pytest.raises(DimensionError):
            C.load_into(target, other, ["vision", "text"])
        assert np.array_equal(target["vision"]["patch.w"].data, before)


@pytest.fixture(scope="module")
def pretrained(small_corpus):
    cfg = TR.TrainConfig(steps=6, batch_size=8, queue_size=16, encoder=SMALL.to_dict())
    return cfg, TR.run_pretrain(cfg, small_corpus)


class TestStages:
    def test_determinism_bytes(self, small_corpus, pretrained, tmp_path):
        cfg, first = pretrained
        second = TR.run_pretrain(cfg, small_corpus)
        a, b = first.save(tmp_path / "a.vlmt"), second.save(tmp_path / "b.vlmt")
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self, small_corpus, pretrained):
        cfg, first = pretrained
        other = TR.run_pretrain(TR.TrainConfig.from_dict({**cfg.to_dict(), "seed": 1}), small_corpus)
        assert other.log[0]["losses"]["total"] != first.log[0]["losses"]["total"]

    def test_log_shape(self, pretrained, tmp_path):
        _, res = pretrained
        assert [r["step"] for r in res.log] == list(range(6))
        assert {"total", "itc", "mlm", "itm"} <= set(res.log[0]["losses"])
        TR.write_metrics(res.log, tmp_path / "m.jsonl")
        rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert rows == res.log

    def test_momentum_once_per_step(self, small_corpus, pretrained):
        # one EMA update per step, applied after the optimizer step
        cfg = TR.TrainConfig(steps=1, batch_size=8, queue_size=16, momentum=0.5, encoder=SMALL.to_dict())
        res = TR.run_pretrain(cfg, small_corpus)
        init = E.init_params(SMALL, substream(0, "init"))["vision"]["patch.w"].data
        want = 0.5 * init + 0.5 * res.params["vision"]["patch.w"].data
        assert np.allclose(res.momentum.shadow["vision"]["patch.w"].data, want, rtol=0, atol=1e-15)

    def test_cross_stage_and_missing(self, small_corpus, pretrained, tmp_path):
        _, res = pretrained
        path = res.save(tmp_path / "base.vlmt")
        enc = SMALL.to_dict()
        rel_cfg = TR.TrainConfig(stage="finetune_relevance", steps=2, batch_size=4, base_checkpoint=str(path),
                                 candidate_pool=8, candidate_per_query=2, encoder=enc)
        rel = TR.run_stage(rel_cfg, small_corpus)
        tpath = rel.save(tmp_path / "rel.vlmt")
        ret_cfg = TR.TrainConfig(stage="finetune_retrieval", steps=2, batch_size=4, base_checkpoint=str(path),
                                 teacher_checkpoint=str(tpath), encoder=enc)
        assert len(TR.run_stage(ret_cfg, small_corpus).log) == 2
        bad = TR.TrainConfig.from_dict({**ret_cfg.to_dict(), "teacher_checkpoint": str(tmp_path / "nope.vlmt")})
        with pytest.raises(StateError, match="teacher"):
            TR.run_stage(bad, small_corpus)
        with pytest.raises(StateError, match="base"):
            TR.run_stage(TR.TrainConfig(stage="finetune_relevance", steps=1, encoder=enc), small_corpus)

    def test_encoder_mismatch(self, small_corpus, pretrained):
        _, res = pretrained
        res.params.meta = res.checkpoint_meta()
        other = E.EncoderConfig(dim=8, layers=1, heads=2, vocab_size=32, max_text_len=8, patch_grid=2, patch_dim=4,
                                proj_dim=4, mlp_ratio=4)
        with pytest.raises(StateError):
            TR.run_finetune_relevance(TR.TrainConfig(stage="finetune_relevance", steps=1,
                                                     encoder=other.to_dict()), small_corpus, res.params)

    def test_smoothed(self):
        assert TR.smoothed([1, 2, 3, 4], 2).tolist() == [1.5, 2.5, 3.5]
