import dataclasses

import numpy as np
import pytest

from anyd.autodiff import NumericError
from anyd.datakit import DrivingRecord
from anyd.planner import Command, init_model
from anyd.trainer import (PseudoLabel, SslConfig, TrainConfig, lr_at,
                          pseudo_label, train_centralized, train_ssl,
                          write_loss_trace)
from anyd.verify import MICRO_CONFIG, make_records


def micro_train_cfg(**kw):
    defaults = dict(batch_size=4, iterations=10, lr0=0.02, decay=0.997,
                    weight_decay=1e-3, seed=3)
    defaults.update(kw)
    return TrainConfig(**defaults)


def params_equal(a, b):
    na, nb = a.named_parameters(), b.named_parameters()
    return all(np.array_equal(na[k].value, nb[k].value) for k in na)


def test_lr_schedule_values():
    cfg = TrainConfig(lr0=0.1, decay=0.997)
    assert lr_at(0, cfg) == pytest.approx(0.1, rel=1e-15)
    assert lr_at(1, cfg) == pytest.approx(0.0997, rel=1e-12)
    assert lr_at(2, cfg) == pytest.approx(0.0994009, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_zero_iterations_returns_init_unchanged():
    init = init_model(MICRO_CONFIG, seed=0)
    records = make_records(MICRO_CONFIG, 6, seed=1)
    model, trace = train_centralized(records, micro_train_cfg(iterations=0),
                                     init)
    assert trace == []
    assert params_equal(model, init)


def test_training_deterministic():
    init = init_model(MICRO_CONFIG, seed=0)
    records = make_records(MICRO_CONFIG, 8, seed=2)
    cfg = micro_train_cfg(iterations=6)
    model_a, trace_a = train_centralized(records, cfg, init)
    model_b, trace_b = train_centralized(records, cfg, init)
    assert params_equal(model_a, model_b)
    assert trace_a == trace_b


def test_training_does_not_mutate_init():
    init = init_model(MICRO_CONFIG, seed=0)
    snapshot = {k: v.value.copy() for k, v in init.named_parameters().items()}
    records = make_records(MICRO_CONFIG, 6, seed=3)
    train_centralized(records, micro_train_cfg(iterations=3), init)
    for k, v in init.named_parameters().items():
        assert np.array_equal(v.value, snapshot[k])


def _linear_toy_records(n, seed):
    # straight driving at recorded speed: waypoints are linear in the speed
    # input, so a short run must cut the cloning loss sharply
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        v = float(rng.uniform(2.0, 12.0))
        wp = np.array([[0.0, v * t] for t in (0.5, 1.0, 1.5, 2.0, 2.5)])
        image = rng.uniform(0.0, 1.0, (MICRO_CONFIG.image_h,
                                       MICRO_CONFIG.image_w,
                                       MICRO_CONFIG.image_ch))
        records.append(DrivingRecord(
            id=f"toy{i}", image=image, speed=v, command=Command.FORWARD,
            region_id=0, region_name="a", waypoints=wp, tags=[]))
    return records


def test_linear_toy_problem_loss_halves():
    records = _linear_toy_records(50, seed=4)
    init = init_model(MICRO_CONFIG, seed=5)
    cfg = micro_train_cfg(batch_size=8, iterations=200, seed=6)
    _, trace = train_centralized(records, cfg, init)
    first_bc, last_bc = trace[0][3], trace[-1][3]
    assert last_bc <= 0.5 * first_bc


def test_loss_trace_rows_and_csv(tmp_path):
    records = make_records(MICRO_CONFIG, 6, seed=7)
    init = init_model(MICRO_CONFIG, seed=8)
    _, trace = train_centralized(records, micro_train_cfg(iterations=4), init)
    assert [row[0] for row in trace] == [0, 1, 2, 3]
    for row in trace:
        assert np.isfinite(row[1:]).all()
    path = tmp_path / "loss.csv"
    write_loss_trace(trace, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,lr,L,L_BC,L_cmd,L_geo"
    assert len(lines) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_reports_iteration():
    records = make_records(MICRO_CONFIG, 6, seed=9)
    init = init_model(MICRO_CONFIG, seed=10)
    cfg = micro_train_cfg(lr0=1e9, weight_decay=1.0, iterations=50)
    with pytest.raises(NumericError) as err:
        train_centralized(records, cfg, init)
    assert "iteration" in str(err.value)


# ------------------------------------------------------------ pseudo-label


def _constant_model(config, value, seed=0):
    # zeroed parameters except the branch output biases: every prediction
    # equals `value` for all branches
    model = init_model(config, seed=seed)
    for p in model.parameters():
        p.value[...] = 0.0
    for branch in model.planner.branches:
        branch.b3.value[...] = value
    return model


def test_pseudo_label_identical_models_keep_everything():
    records = make_records(MICRO_CONFIG, 12, seed=11)
    unlabeled = [dataclasses.replace(r, waypoints=None) for r in records]
    model = init_model(MICRO_CONFIG, seed=12)
    labels = pseudo_label([model, model.copy(), model.copy()], unlabeled,
                          SslConfig(variance_threshold=0.0))
    assert len(labels) == len(unlabeled)
    for label in labels:
        assert label.confidence == 0.0


def test_pseudo_label_empty_input():
    model = init_model(MICRO_CONFIG, seed=13)
    assert pseudo_label([model, model], [], SslConfig()) == []


def test_pseudo_label_requires_two_models():
    model = init_model(MICRO_CONFIG, seed=14)
    with pytest.raises(ValueError):
        pseudo_label([model], [], SslConfig())


def test_pseudo_label_constant_models_match_hand_variance():
    records = make_records(MICRO_CONFIG, 5, seed=15)
    unlabeled = [dataclasses.replace(r, waypoints=None) for r in records]
    values = [1.0, 2.0, 6.0]
    models = [_constant_model(MICRO_CONFIG, v) for v in values]
    labels = pseudo_label(models, unlabeled,
                          SslConfig(variance_threshold=1e9))
    expected_mean = np.mean(values)
    expected_var = np.mean((np.array(values) - expected_mean) ** 2)
    assert len(labels) == len(unlabeled)
    for label in labels:
        assert np.abs(label.waypoints - expected_mean).max() <= 1e-12
        assert label.confidence == pytest.approx(expected_var, abs=1e-12)


def test_pseudo_label_keep_drop_matches_brute_force():
    records = make_records(MICRO_CONFIG, 40, seed=16)
    unlabeled = [dataclasses.replace(r, waypoints=None) for r in records]
    models = [init_model(MICRO_CONFIG, seed=s) for s in (21, 22, 23)]
    ssl = SslConfig()   # percentile threshold path
    labels = pseudo_label(models, unlabeled, ssl)
    kept_ids = {l.record_id for l in labels}

    from anyd.evalkit import predict_waypoints
    stacked = np.stack([predict_waypoints(unlabeled, m) for m in models])
    variances = stacked.var(axis=0).reshape(len(unlabeled), -1).mean(axis=1)
    threshold = np.percentile(variances, 80.0)
    expected = {r.id for r, v in zip(unlabeled, variances) if v <= threshold}
    assert kept_ids == expected


# ------------------------------------------------------------------- ssl


def test_train_ssl_empty_pseudo_equals_plain_fine_tune():
    labeled = make_records(MICRO_CONFIG, 8, seed=17)
    init = init_model(MICRO_CONFIG, seed=18)
    cfg = micro_train_cfg(iterations=5)
    ssl = SslConfig(ssl_lr0=1e-3, ssl_iterations=5)
    tuned = train_ssl(labeled, [], [], cfg, ssl, init)
    plain, _ = train_centralized(
        labeled, dataclasses.replace(cfg, lr0=1e-3, iterations=5), init)
    assert params_equal(tuned, plain)


def test_train_ssl_zero_iterations_identity():
    labeled = make_records(MICRO_CONFIG, 6, seed=19)
    init = init_model(MICRO_CONFIG, seed=20)
    tuned = train_ssl(labeled, [], [], micro_train_cfg(),
                      SslConfig(ssl_iterations=0), init)
    assert params_equal(tuned, init)


def test_train_ssl_uses_pseudo_labels_deterministically():
    labeled = make_records(MICRO_CONFIG, 6, seed=21)
    unlabeled = [dataclasses.replace(r, waypoints=None)
                 for r in make_records(MICRO_CONFIG, 6, seed=22)]
    pseudo = [PseudoLabel(record_id=r.id, waypoints=np.ones((5, 2)),
                          confidence=0.0) for r in unlabeled]
    init = init_model(MICRO_CONFIG, seed=23)
    cfg = micro_train_cfg(iterations=4)
    ssl = SslConfig(ssl_iterations=4)
    a = train_ssl(labeled, unlabeled, pseudo, cfg, ssl, init)
    b = train_ssl(labeled, unlabeled, pseudo, cfg, ssl, init)
    assert params_equal(a, b)
    without_pseudo = train_ssl(labeled, [], [], cfg, ssl, init)
    assert not params_equal(a, without_pseudo)


def test_train_ssl_unknown_pseudo_id_rejected():
    labeled = make_records(MICRO_CONFIG, 4, seed=24)
    init = init_model(MICRO_CONFIG, seed=25)
    with pytest.raises(ValueError):
        train_ssl(labeled, [], [PseudoLabel("ghost", np.zeros((5, 2)), 0.0)],
                  micro_train_cfg(), SslConfig(), init)
