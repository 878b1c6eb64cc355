"""Losses, negative mining, the optimizer, training, and checkpoints."""

import math

import numpy as np
import pytest

from toys import toy_batch
from oracles import infonce_ref, triplet_ref
from uem import matching
from uem.autograd import Tape, Tensor, grad_check
from uem.errors import (CheckpointFormatError, ConfigError, NoNegativesError,
                        NumericDomainError, ShapeError, TrainingDivergedError)
from uem.matching import (Adam, BatchSimilarities, TrainingConfig, _make_batches,
                          batch_similarities, choose_negatives, infonce_loss,
                          load_checkpoint, save_checkpoint, total_loss, train,
                          triplet_loss)
from uem.model import init_model


def _batch(values, positive_of_query, requires_grad=False):
    """BatchSimilarities over a plain score matrix (queries in columns)."""
    values = np.asarray(values, dtype=np.float64)
    nv, nq = values.shape
    tensors = [[Tensor(values[i, j], requires_grad=requires_grad)
                for j in range(nq)] for i in range(nv)]
    mask = np.zeros((nv, nq), dtype=bool)
    for q, v in enumerate(positive_of_query):
        mask[v, q] = True
    return BatchSimilarities(tensors=tensors, values=values, positive_mask=mask,
                             video_ids=[f"v{i}" for i in range(nv)],
                             text_ids=[f"t{j}" for j in range(nq)])


class TestTrainingConfig:
    def test_defaults(self):
        cfg = TrainingConfig()
        assert cfg.margin == 0.2 and cfg.lambda_ == 0.02 and cfg.batch_size == 64

    def test_from_mapping_uses_file_spellings(self):
        cfg, leftover = TrainingConfig.from_mapping(
            {"lambda": "0.5", "margin": "0.1", "epochs": "7", "dim": "64"})
        assert cfg.lambda_ == 0.5 and cfg.margin == 0.1 and cfg.epochs == 7
        assert leftover == {"dim": "64"}  # not a training key; handed back

    def test_from_mapping_bad_value(self):
        with pytest.raises(ConfigError, match="epochs"):
            TrainingConfig.from_mapping({"epochs": "many"})

    @pytest.mark.parametrize("kwargs", [
        {"margin": -0.1}, {"lambda_": -1.0}, {"temperature": 0.0},
        {"batch_size": 0}, {"epochs": -1}, {"nce_form": "linear"},
        {"lr_decay_factor": 0.0}, {"lr_patience": 0},
    ])
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ConfigError):
            TrainingConfig(**kwargs)

    def test_round_trip_through_dict(self):
        cfg = TrainingConfig(margin=0.3, lambda_=0.1, epochs=5)
        assert TrainingConfig(**cfg.to_dict()) == cfg


class TestBatchSimilarities:
    def test_requires_one_positive_per_query(self):
        values = np.array([[1.0, 0.5], [0.2, 0.1]])
        tensors = [[Tensor(v) for v in row] for row in values]
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True  # second query has no positive at all
        with pytest.raises(ShapeError):
            BatchSimilarities(tensors=tensors, values=values, positive_mask=mask,
                              video_ids=["v0", "v1"], text_ids=["t0", "t1"])

    def test_two_queries_may_share_a_video(self):
        S = _batch([[1.0, 0.5], [0.2, 0.1]], [0, 0])
        assert S.positive_video_of(0) == 0 and S.positive_video_of(1) == 0

    def test_positive_lookup(self):
        S = _batch([[1.0, 0.5], [0.2, 0.8]], [0, 1])
        assert S.positive_video_of(0) == 0 and S.positive_video_of(1) == 1


class TestChooseNegatives:
    def test_hardest_matches_exhaustive_argmax(self, rng):
        for _ in range(30):
            nv = nq = int(rng.integers(2, 7))
            values = rng.standard_normal((nv, nq))
            S = _batch(values, list(range(nq)))
            neg_q, neg_v = choose_negatives(S, "hardest")
            for q in range(nq):
                v = q
                want_q = max((j for j in range(nq) if j != q),
                             key=lambda j: (values[v, j], -j))
                want_v = max((i for i in range(nv) if i != v),
                             key=lambda i: (values[i, q], -i))
                assert (neg_q[q], neg_v[q]) == (want_q, want_v)

    def test_hardest_tie_takes_lowest_index(self):
        S = _batch([[1.0, 0.7, 0.7], [0.7, 1.0, 0.3], [0.7, 0.3, 1.0]], [0, 1, 2])
        neg_q, neg_v = choose_negatives(S, "hardest")
        assert neg_q[0] == 1 and neg_v[0] == 1

    def test_random_is_seeded(self):
        S = _batch(np.eye(4), [0, 1, 2, 3])
        a = choose_negatives(S, "random", np.random.default_rng(5))
        b = choose_negatives(S, "random", np.random.default_rng(5))
        assert a == b
        for q, (j, i) in enumerate(zip(*a)):
            assert j != q and i != q

    def test_singleton_batch_has_no_negatives(self):
        with pytest.raises(NoNegativesError):
            choose_negatives(_batch([[1.0]], [0]), "hardest")

    def test_unknown_policy(self):
        with pytest.raises(ConfigError):
            choose_negatives(_batch(np.eye(2), [0, 1]), "easiest")


class TestTripletLoss:
    def test_hand_worked_case(self):
        # q0: hinges 0.2+0.95-1.0 and 0.2+0.9-1.0 -> 0.15 + 0.10
        # q1: hinges 0.2+0.90-0.5 and 0.2+0.95-0.5 -> 0.60 + 0.65
        S = _batch([[1.0, 0.95], [0.9, 0.5]], [0, 1])
        loss = triplet_loss(S, margin=0.2, negatives=([1, 0], [1, 0]))
        assert float(loss.data) == pytest.approx(0.75, abs=1e-12)

    def test_inactive_hinges_give_zero(self):
        S = _batch([[5.0, 0.0], [0.0, 5.0]], [0, 1])
        loss = triplet_loss(S, margin=0.2, negatives=([1, 0], [1, 0]))
        assert float(loss.data) == 0.0

    def test_matches_reference_on_random_batches(self, rng):
        for _ in range(40):
            nv = nq = int(rng.integers(2, 6))
            values = rng.standard_normal((nv, nq))
            pos = list(range(nq))
            neg_q = [int(rng.choice([j for j in range(nq) if j != q])) for q in range(nq)]
            neg_v = [int(rng.choice([i for i in range(nv) if i != q])) for q in range(nq)]
            got = triplet_loss(_batch(values, pos), 0.2, (neg_q, neg_v))
            want, _ = triplet_ref(values, pos, neg_q, neg_v, 0.2)
            assert float(got.data) == pytest.approx(want, abs=1e-12)

    def test_gradient_flows_to_scores(self):
        S = _batch([[1.0, 0.95], [0.9, 0.5]], [0, 1], requires_grad=True)
        with Tape() as tape:
            S2 = BatchSimilarities(tensors=S.tensors, values=S.values,
                                   positive_mask=S.positive_mask,
                                   video_ids=S.video_ids, text_ids=S.text_ids)
            loss = triplet_loss(S2, 0.2, ([1, 0], [1, 0]))
        tape.backward(loss)
        # all four hinges are active; each positive collects -2/nq and each
        # off-diagonal score serves as a negative in both queries (+2/nq)
        assert S.tensors[0][0].grad == pytest.approx(-1.0)
        assert S.tensors[1][1].grad == pytest.approx(-1.0)
        assert S.tensors[0][1].grad == pytest.approx(1.0)
        assert S.tensors[1][0].grad == pytest.approx(1.0)


class TestInfonceLoss:
    def test_no_negatives_is_zero(self):
        loss = infonce_loss(_batch([[0.37]], [0]))
        assert float(loss.data) == 0.0

    def test_uniform_scores_give_log_batch_size(self):
        # every ratio is 1/nv, both directions, so loss = 2*log(nv)
        for n in (2, 3, 5):
            S = _batch(np.full((n, n), 0.4), list(range(n)))
            loss = infonce_loss(S, temperature=1.0)
            assert float(loss.data) == pytest.approx(2 * math.log(n), abs=1e-12)

    def test_matches_reference(self, rng):
        for _ in range(30):
            n = int(rng.integers(2, 6))
            values = rng.standard_normal((n, n))
            tau = float(rng.uniform(0.2, 2.0))
            got = infonce_loss(_batch(values, list(range(n))), tau)
            want = infonce_ref(values, list(range(n)), tau)
            assert float(got.data) == pytest.approx(want, abs=1e-10)

    def test_exponentiated_form_is_nonnegative(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 5))
            S = _batch(rng.standard_normal((n, n)) * 3, list(range(n)))
            assert float(infonce_loss(S, 0.7).data) >= 0.0

    def test_raising_a_negative_raises_the_loss(self):
        base = np.array([[0.9, 0.1], [0.1, 0.8]])
        bumped = base.copy()
        bumped[0, 1] += 0.3
        lo = float(infonce_loss(_batch(base, [0, 1])).data)
        hi = float(infonce_loss(_batch(bumped, [0, 1])).data)
        assert hi > lo

    def test_verbatim_matches_reference_when_positive(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 5))
            values = rng.uniform(0.05, 1.0, size=(n, n))
            got = infonce_loss(_batch(values, list(range(n))), 1.0, "verbatim")
            want = infonce_ref(values, list(range(n)), 1.0, form="verbatim")
            assert float(got.data) == pytest.approx(want, abs=1e-10)

    def test_verbatim_rejects_nonpositive_ratio(self):
        S = _batch([[-0.2, 0.5], [0.1, 0.9]], [0, 1])
        with pytest.raises(NumericDomainError, match=r"video v0, text t0"):
            infonce_loss(S, 1.0, "verbatim")

    def test_unknown_form(self):
        with pytest.raises(ConfigError):
            infonce_loss(_batch(np.eye(2), [0, 1]), 1.0, "softplus")


class TestTotalLoss:
    def test_lambda_zero_is_pure_triplet(self):
        S = _batch([[1.0, 0.95], [0.9, 0.5]], [0, 1])
        cfg = TrainingConfig(lambda_=0.0)
        negs = ([1, 0], [1, 0])
        assert float(total_loss(S, cfg, negs).data) == \
            float(triplet_loss(S, cfg.margin, negs).data)

    def test_combination_is_weighted_sum(self):
        S = _batch([[1.0, 0.95], [0.9, 0.5]], [0, 1])
        cfg = TrainingConfig(lambda_=0.25)
        negs = ([1, 0], [1, 0])
        want = (float(triplet_loss(S, cfg.margin, negs).data)
                + 0.25 * float(infonce_loss(S, cfg.temperature).data))
        assert float(total_loss(S, cfg, negs).data) == pytest.approx(want, abs=1e-14)

    def test_gradient_through_both_terms(self):
        # scores kept away from hinge boundaries so finite differences are clean
        values = np.array([[0.9, 0.3, -0.1],
                           [0.2, 0.7, 0.1],
                           [-0.3, 0.1, 0.6]])
        S = _batch(values, [0, 1, 2], requires_grad=True)
        params = {f"s{i}{j}": S.tensors[i][j] for i in range(3) for j in range(3)}
        negs = ([1, 0, 1], [2, 2, 0])
        cfg = TrainingConfig(lambda_=0.1, margin=0.2)

        def f():
            return total_loss(S, cfg, negs)

        report = grad_check(f, params)
        assert report.ok, report.failures[:3]


class TestEndToEndScoring:
    def test_batch_matrix_matches_pairwise_scoring(self, toy_model):
        from uem.encoders import encode_text, encode_video
        from uem.matching import score_pair, segment_encoded_frames

        videos, queries, _ = toy_batch(21)
        S = batch_similarities(toy_model, videos, queries, list(range(len(videos))))
        for i, v in enumerate(videos):
            emb = encode_video(toy_model.video_encoder, toy_model.config, v)
            seg = segment_encoded_frames(emb.data, toy_model.config, v.video_id)
            for j, q in enumerate(queries):
                qe = encode_text(toy_model.text_encoder, toy_model.config, q)
                one = score_pair(emb, seg, qe, toy_model)
                assert float(one.similarity.data) == pytest.approx(S.values[i, j], abs=1e-12)

    def test_scores_are_cosines(self, toy_model):
        videos, queries, _ = toy_batch(22)
        S = batch_similarities(toy_model, videos, queries, list(range(len(videos))))
        assert np.all(S.values <= 1.0) and np.all(S.values >= -1.0)


class TestAdam:
    def test_zero_learning_rate_freezes_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.0)
        before = p.data.copy()
        for _ in range(3):
            p.grad[...] = np.array([0.5, -1.5])
            opt.step()
        assert np.array_equal(p.data, before)

    def test_first_step_follows_sign_of_gradient(self):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad[...] = np.array([3.0, -0.2])
        opt.step()
        # bias-corrected first step is ~ -lr * sign(g)
        assert p.data[0] == pytest.approx(-0.1, rel=1e-6)
        assert p.data[1] == pytest.approx(0.1, rel=1e-6)

    def test_skips_parameters_without_gradients(self):
        p = Tensor(np.array([1.0]))  # frozen: no grad buffer
        opt = Adam({"p": p}, lr=0.5)
        opt.step()
        assert p.data[0] == 1.0


class TestBatching:
    def test_trailing_singleton_folds_into_previous(self):
        assert _make_batches(list(range(5)), 2) == [[0, 1], [2, 3, 4]]

    def test_exact_split_untouched(self):
        assert _make_batches(list(range(6)), 3) == [[0, 1, 2], [3, 4, 5]]

    def test_single_batch_kept_even_if_singleton(self):
        assert _make_batches([7], 4) == [[7]]


class TestTrain:
    def test_deterministic_runs_agree_bitwise(self, toy_config, train_config):
        _, _, data = toy_batch(31)
        logs = []
        finals = []
        for _ in range(2):
            model = init_model(toy_config, seed=1)
            logs.append(train(model, data.dataset(), train_config, seed=9))
            finals.append({k: v.data.copy() for k, v in model.named_parameters().items()})
        assert logs[0] == logs[1]
        for k in finals[0]:
            assert np.array_equal(finals[0][k], finals[1][k]), k

    def test_log_structure_and_policy_switch(self, toy_config):
        _, _, data = toy_batch(32)
        cfg = TrainingConfig(batch_size=4, epochs=3, learning_rate=1e-3,
                             hard_negative_start_epoch=1)
        model = init_model(toy_config, seed=0)
        log = train(model, data.dataset(), cfg, seed=0)
        assert [e["epoch"] for e in log] == [1, 2, 3]
        assert log[0]["negative_policy"] == "random"
        assert log[1]["negative_policy"] == "hardest"
        assert all(math.isfinite(e["mean_loss"]) for e in log)
        assert log[-1]["steps"] == 3  # 4 pairs, batch 4 -> one step per epoch

    def test_zero_epochs_is_a_no_op(self, toy_config, train_config):
        import dataclasses
        _, _, data = toy_batch(33)
        model = init_model(toy_config, seed=2)
        before = {k: v.data.copy() for k, v in model.named_parameters().items()}
        log = train(model, data.dataset(), dataclasses.replace(train_config, epochs=0))
        assert log == []
        for k, v in model.named_parameters().items():
            assert np.array_equal(before[k], v.data)

    def test_divergence_raises_with_location(self, toy_config, train_config, monkeypatch):
        _, _, data = toy_batch(34)
        model = init_model(toy_config, seed=0)
        monkeypatch.setattr(matching, "total_loss",
                            lambda *a, **k: Tensor(float("nan")))
        with pytest.raises(TrainingDivergedError) as exc:
            train(model, data.dataset(), train_config, seed=0)
        assert exc.value.epoch == 1 and exc.value.step == 0

    def test_validation_plateau_decays_learning_rate(self, toy_config):
        from uem.data_io import Dataset
        _, _, data = toy_batch(35)
        # a single-video validation set pins summed recall at 400, so the
        # metric can never improve after the first epoch
        full = data.dataset()
        vid = full.video_ids()[0]
        tid = full.texts_of(vid)[0].text_id
        val = Dataset(name="val", _videos={vid: full.video_features(vid)},
                      _texts={tid: (vid, full.text_features(tid))})
        cfg = TrainingConfig(batch_size=4, epochs=3, learning_rate=1e-3,
                             lr_patience=1, lr_decay_factor=0.1)
        log = train(init_model(toy_config, seed=0), full, cfg, seed=0, val_dataset=val)
        assert log[0]["val_sumr"] == pytest.approx(400.0)
        assert log[1]["lr"] == pytest.approx(1e-3)       # decay applies after epoch 2
        assert log[2]["lr"] == pytest.approx(1e-4)

    def test_epoch_log_lines_are_json(self, toy_config, train_config, tmp_path):
        import json
        _, _, data = toy_batch(36)
        path = tmp_path / "log.jsonl"
        with open(path, "w") as fh:
            log = train(init_model(toy_config, seed=0), data.dataset(),
                        train_config, seed=0, log_file=fh)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert lines == log


class TestCheckpoints:
    def test_round_trip_at_storage_precision(self, toy_config, tmp_path):
        model = init_model(toy_config, seed=4)
        cfg = TrainingConfig(margin=0.3, epochs=5)
        path = tmp_path / "model.uemc"
        save_checkpoint(path, model, cfg)
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded.config == model.config
        assert loaded_cfg == cfg
        for name, p in model.named_parameters().items():
            got = loaded.named_parameters()[name].data
            assert np.array_equal(got, p.data.astype(np.float32).astype(np.float64)), name

    def test_training_config_is_optional(self, toy_config, tmp_path):
        path = tmp_path / "bare.uemc"
        save_checkpoint(path, init_model(toy_config, seed=0))
        _, cfg = load_checkpoint(path)
        assert cfg is None

    def test_bad_magic(self, toy_config, tmp_path):
        path = tmp_path / "m.uemc"
        save_checkpoint(path, init_model(toy_config, seed=0))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(raw)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, toy_config, tmp_path):
        path = tmp_path / "m.uemc"
        save_checkpoint(path, init_model(toy_config, seed=0))
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(raw)
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_config_echo_must_parse(self, toy_config, tmp_path):
        path = tmp_path / "m.uemc"
        save_checkpoint(path, init_model(toy_config, seed=0))
        raw = bytearray(path.read_bytes())
        blob_len = int.from_bytes(raw[8:12], "little")
        raw[12:12 + blob_len] = b"{" + b" " * (blob_len - 1)  # same length, invalid JSON
        path.write_bytes(raw)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_values_survive_a_real_update(self, toy_config, train_config, tmp_path):
        _, _, data = toy_batch(37)
        model = init_model(toy_config, seed=0)
        train(model, data.dataset(), train_config, seed=0)
        path = tmp_path / "trained.uemc"
        save_checkpoint(path, model, train_config)
        loaded, _ = load_checkpoint(path)
        fresh = init_model(toy_config, seed=0)
        moved = sum(not np.array_equal(loaded.named_parameters()[k].data,
                                       fresh.named_parameters()[k].data.astype(np.float32))
                    for k in fresh.named_parameters())
        assert moved > 0  # training actually changed what we stored
