"""Event pooling, selection, and cross-attention refinement."""

import numpy as np
import pytest

from oracles import caer_ref, coarse_means_ref, select_ref
from uem import autograd as ag
from uem.autograd import Tensor, grad_check
from uem.errors import DegenerateVectorError, ShapeError
from uem.refinement import coarse_event_reps, refine_event, select_event
from uem.segmentation import EventSegmentation


def _seg(spans):
    return EventSegmentation("v", spans, None)


class TestCoarsePooling:
    def test_singleton_span_passthrough(self, rng):
        emb = Tensor(rng.standard_normal((1, 4)))
        reps = coarse_event_reps(emb, _seg([(0, 0)]))
        assert np.array_equal(reps.data[0], emb.data[0])

    def test_two_point_mean(self):
        emb = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        reps = coarse_event_reps(emb, _seg([(0, 1)]))
        assert np.allclose(reps.data, [[0.5, 0.5]])

    def test_brute_force_means(self, rng):
        emb = Tensor(rng.standard_normal((7, 5)))
        spans = [(0, 1), (2, 5), (6, 6)]
        reps = coarse_event_reps(emb, _seg(spans))
        assert np.allclose(reps.data, coarse_means_ref(emb.data, spans), atol=1e-12)

    def test_coverage_checked(self, rng):
        emb = Tensor(rng.standard_normal((5, 3)))
        with pytest.raises(ShapeError):
            coarse_event_reps(emb, _seg([(0, 2)]))


class TestSelectEvent:
    def test_single_event(self, rng):
        assert select_event(Tensor(rng.standard_normal((1, 4))),
                            Tensor(rng.standard_normal(4))) == 0

    def test_exact_alignment(self):
        reps = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert select_event(reps, Tensor(np.array([0.0, 1.0]))) == 1

    def test_matches_exhaustive_scan(self, rng):
        for _ in range(50):
            reps = rng.standard_normal((5, 6))
            q = rng.standard_normal(6)
            got = select_event(Tensor(reps), Tensor(q))
            want, _ = select_ref(reps, q)
            assert got == want

    def test_tie_takes_lowest_index(self, rng):
        row = rng.standard_normal(4)
        reps = np.stack([row * 2.0, row, row * 0.5])  # identical directions
        q = row + 0.0
        assert select_event(Tensor(reps), Tensor(q)) == 0

    def test_invariant_to_positive_rescaling(self, rng):
        reps = rng.standard_normal((4, 5))
        q = rng.standard_normal(5)
        base = select_event(Tensor(reps), Tensor(q))
        assert select_event(Tensor(reps * 7.0), Tensor(q * 0.01)) == base

    def test_degenerate_rows_rejected(self):
        reps = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateVectorError, match="representation 1"):
            select_event(Tensor(reps), Tensor(np.array([1.0, 0.0])))


class TestRefineEvent:
    def test_singleton_event(self, toy_model, rng):
        q = Tensor(rng.standard_normal(16))
        frames = Tensor(rng.standard_normal((1, 16)))
        out = refine_event(q, frames, toy_model.refiner, ln_eps=toy_model.config.ln_eps)
        assert np.allclose(out.attention_weights, [1.0])
        want, alpha, _ = caer_ref(q.data, frames.data, toy_model.refiner,
                                  toy_model.config.ln_eps)
        assert np.allclose(out.e_ref.data, want, atol=1e-10)

    def test_two_identical_frames_split_mass(self, toy_model, rng):
        q = Tensor(rng.standard_normal(16))
        frame = rng.standard_normal(16)
        pair = refine_event(q, Tensor(np.stack([frame, frame])), toy_model.refiner,
                            ln_eps=toy_model.config.ln_eps)
        single = refine_event(q, Tensor(frame.reshape(1, -1)), toy_model.refiner,
                              ln_eps=toy_model.config.ln_eps)
        assert np.allclose(pair.attention_weights, [0.5, 0.5], atol=1e-12)
        assert np.allclose(pair.e_ref.data, single.e_ref.data, atol=1e-12)

    def test_matches_straight_line_reference(self, toy_model, rng):
        q = rng.standard_normal(16)
        frames = rng.standard_normal((6, 16))
        out = refine_event(Tensor(q), Tensor(frames), toy_model.refiner,
                           ln_eps=toy_model.config.ln_eps)
        want, alpha, _ = caer_ref(q, frames, toy_model.refiner, toy_model.config.ln_eps)
        assert np.allclose(out.e_ref.data, want, atol=1e-10)
        assert np.allclose(out.attention_weights, alpha, atol=1e-10)

    def test_attention_is_probability_vector(self, toy_model, rng):
        for n in (1, 2, 5, 9):
            out = refine_event(Tensor(rng.standard_normal(16) * 4),
                               Tensor(rng.standard_normal((n, 16)) * 4),
                               toy_model.refiner, ln_eps=toy_model.config.ln_eps)
            w = out.attention_weights
            assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_context_in_convex_hull(self, toy_model, rng):
        # pre-MLP context = alpha @ V lies inside V's row hull: check coordinatewise bounds
        from oracles import layer_norm_ref
        q = rng.standard_normal(16)
        frames = rng.standard_normal((5, 16))
        rp = toy_model.refiner
        out = refine_event(Tensor(q), Tensor(frames), rp, ln_eps=toy_model.config.ln_eps)
        fl = layer_norm_ref(frames, rp.ln_e.gamma.data, rp.ln_e.beta.data,
                            toy_model.config.ln_eps)
        values = fl @ rp.w_v.data
        ctx = out.attention_weights @ values
        assert np.all(ctx <= values.max(axis=0) + 1e-12)
        assert np.all(ctx >= values.min(axis=0) - 1e-12)

    def test_duplicating_frames_preserves_output(self, toy_model, rng):
        q = Tensor(rng.standard_normal(16))
        frames = rng.standard_normal((3, 16))
        once = refine_event(q, Tensor(frames), toy_model.refiner,
                            ln_eps=toy_model.config.ln_eps)
        twice = refine_event(q, Tensor(np.concatenate([frames, frames])),
                             toy_model.refiner, ln_eps=toy_model.config.ln_eps)
        # per-distinct-frame mass ratios survive duplication; the output is unchanged
        assert np.allclose(twice.attention_weights[:3] / twice.attention_weights[3:], 1.0)
        assert np.allclose(2 * twice.attention_weights[:3], once.attention_weights, atol=1e-12)
        assert np.allclose(twice.e_ref.data, once.e_ref.data, atol=1e-12)

    def test_empty_event_rejected(self, toy_model, rng):
        with pytest.raises(ShapeError):
            refine_event(Tensor(rng.standard_normal(16)), Tensor(np.empty((0, 16))),
                         toy_model.refiner)

    def test_gradients(self, toy_model, rng):
        q = Tensor(rng.standard_normal(16))
        frames = Tensor(rng.standard_normal((4, 16)))
        target = rng.standard_normal(16)
        params = {k: v for k, v in toy_model.named_parameters().items()
                  if k.startswith("refiner")}

        def f():
            out = refine_event(q, frames, toy_model.refiner,
                               ln_eps=toy_model.config.ln_eps)
            return ag.cosine(out.e_ref, Tensor(target))

        report = grad_check(f, params, max_entries_per_param=4, seed=3)
        assert report.ok, report.failures[:3]
