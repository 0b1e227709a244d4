"""Acceptance gate for the whole package.

Each test here checks one headline deliverable property end to end and
prints a single verdict line (visible in the terminal run) before
asserting, so a full run yields a compact pass/fail scoreboard.
"""

import math
import time

import numpy as np
import pytest

from monet.cells import (CellConfig, Hallucinator, count_params, init_monet,
                         match_params, monet_forward, monet_unit)
from monet.classify import (_np_softmax, classify, ensemble,
                            fit_linear_classifier, pooled_matrix,
                            top1_accuracy)
from monet.data import (SyntheticTaskSpec, generate_synthetic, read_dataset,
                        write_dataset)
from monet.gradcheck import check_family
from monet.tensor import Tape, Tensor, jacobian
from monet.training import (LossConfig, TrainConfig, hallucination_loss,
                            lr_at, train)


def verdict(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)


# ---------------------------------------------------------------------------

def test_gradient_suite(capsys):
    runs = [("vanilla-rnn", 1), ("gru", 1), ("lstm", 1), ("bi-gru", 1),
            ("bi-lstm", 1), ("conv1d", 1), ("monet", 1), ("monet", 3),
            ("monet", 5)]
    start = time.perf_counter()
    worst = 0.0
    worst_tag = ""
    for family, layers in runs:
        result = check_family(family, layers, instances=10)
        if result.max_rel_err > worst:
            worst = result.max_rel_err
            worst_tag = f"{family}/L{layers}"
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 60.0
    verdict(capsys, "gradient suite", ok,
            f"9 family runs x 10 instances, worst rel err {worst:.2e} "
            f"({worst_tag}), {elapsed:.1f}s")
    assert worst <= 1e-5, worst_tag
    assert elapsed < 60.0


def test_fusion_convexity(capsys):
    rng = np.random.default_rng(17)
    worst_sum = 0.0
    worst_hull = -np.inf
    weights_in_range = True
    for _ in range(20):
        p = init_monet(4, 5, rng)
        for _ in range(50):
            x = Tensor(rng.uniform(-2, 2, (1, 4)))
            left = Tensor(rng.uniform(-2, 2, (1, 5)))
            right = Tensor(rng.uniform(-2, 2, (1, 5)))
            tr = monet_unit(x, left, right, p)
            total = tr.weight_cand.data + tr.weight_right.data + tr.weight_left.data
            worst_sum = max(worst_sum, float(np.max(np.abs(total - 1.0))))
            for w in (tr.weight_cand, tr.weight_right, tr.weight_left):
                weights_in_range &= bool(np.all((w.data > 0.0) & (w.data < 1.0)))
            lo = np.minimum(np.minimum(tr.candidate.data, left.data), right.data)
            hi = np.maximum(np.maximum(tr.candidate.data, left.data), right.data)
            excursion = float(max(np.max(lo - tr.out.data), np.max(tr.out.data - hi)))
            worst_hull = max(worst_hull, excursion)
    ok = worst_sum <= 1e-12 and weights_in_range and worst_hull <= 1e-12
    verdict(capsys, "fusion convexity", ok,
            f"1000 steps, worst |sum-1| {worst_sum:.2e}, weights in (0,1): "
            f"{weights_in_range}, worst hull excursion {worst_hull:.2e}")
    assert ok


def test_receptive_field(capsys):
    t_len, d_x, d_s = 9, 5, 4
    rng = np.random.default_rng(61)  # pinned: no dead in-band block
    p = init_monet(d_x, d_s, rng)
    X = Tensor(rng.uniform(-1, 1, (t_len, d_x)), requires_grad=True)
    band_ok = True
    causal_ok = True
    for layers in (1, 2, 3):
        with Tape() as tape:
            out = monet_forward(X, p, layers)
        jac = jacobian(out, X, tape)
        with Tape() as tape:
            out_c = monet_forward(X, p, layers, causal_only=True)
        jac_c = jacobian(out_c, X, tape)
        for t in range(t_len):
            for u in range(t_len):
                mag = np.max(np.abs(jac[t * d_s:(t + 1) * d_s, u * d_x:(u + 1) * d_x]))
                inside = abs(u - t) <= layers
                band_ok &= (mag > 0.0) if inside else (mag == 0.0)
                mag_c = np.max(np.abs(jac_c[t * d_s:(t + 1) * d_s, u * d_x:(u + 1) * d_x]))
                if u > t:
                    causal_ok &= mag_c == 0.0
    ok = band_ok and causal_ok
    verdict(capsys, "receptive field", ok,
            f"depths 1-3 at length {t_len}: dependence iff within depth "
            f"{band_ok}, future blocked under causal mode {causal_ok}")
    assert ok


def test_parameter_counts(capsys):
    gru_cfg = CellConfig(family="gru", d_x=4, d_s=4)
    unit_cfg = CellConfig(family="monet", d_x=4, d_s=4)
    gru_n = count_params(gru_cfg)
    unit_n = count_params(unit_cfg)
    built_match = all(
        count_params(cfg) == sum(t.size for t in
                                 Hallucinator.build(cfg, np.random.default_rng(0)).tensors())
        for cfg in (gru_cfg, unit_cfg))
    ok = gru_n == 108 and unit_n == 156 and built_match
    verdict(capsys, "parameter counts", ok,
            f"gru(4,4)={gru_n} (want 108), expansion-unit(4,4)={unit_n} "
            f"(want 156), formulas match built models: {built_match}")
    assert ok


def test_ordering_experiment(capsys):
    start = time.perf_counter()
    matched = match_params(CellConfig(family="monet", d_x=16, d_s=16, layers=3),
                           "gru")
    assert matched.matched and matched.gap <= 0.05
    runs = {"gru": matched.config}
    for layers in (1, 2, 3):
        runs[f"unit-L{layers}"] = CellConfig(family="monet", d_x=16, d_s=16,
                                             layers=layers)
    results: dict[int, dict[str, float]] = {}
    for seed in range(5):
        spec = SyntheticTaskSpec(n_classes=8, seq_len=20, d_x=16, d_s=16,
                                 n_train=2000, n_val=400, noise_sigma=0.05,
                                 seed=seed)
        tr, va = generate_synthetic(spec)
        tcfg = TrainConfig(lr=3e-3, decay_factor=0.1, decay_every=18,
                           clip_norm=1.0, max_epochs=24, batch_size=32,
                           seed=seed, optimizer="adam", patience=24)
        row = {}
        for name, cfg in runs.items():
            model = Hallucinator.build(cfg, np.random.default_rng(seed))
            report = train(model, tr, va, tcfg, LossConfig(alpha=0.0))
            row[name] = report.best_val_mse
        results[seed] = row
        with capsys.disabled():
            print(f"    seed {seed}: " +
                  "  ".join(f"{k}={v:.5f}" for k, v in row.items()), flush=True)
    means = {k: float(np.mean([results[s][k] for s in results]))
             for k in results[0]}
    wins = sum(results[s]["unit-L3"] < results[s]["gru"] for s in results)
    beats_gru = wins >= 4
    depth_flat = means["unit-L1"] >= means["unit-L2"] >= means["unit-L3"]
    elapsed = time.perf_counter() - start
    in_budget = elapsed < 900.0
    ok = beats_gru and depth_flat and in_budget
    verdict(capsys, "ordering experiment", ok,
            f"unit-L3 beats matched gru on {wins}/5 seeds "
            f"(means: gru {means['gru']:.5f} vs L3 {means['unit-L3']:.5f}); "
            f"depth means L1 {means['unit-L1']:.5f} -> L2 {means['unit-L2']:.5f} "
            f"-> L3 {means['unit-L3']:.5f} non-increasing: {depth_flat}; "
            f"{elapsed:.0f}s")
    assert beats_gru, f"only {wins}/5 seeds"
    assert depth_flat, (f"seed-averaged val MSE increases with depth: "
                        f"L1 {means['unit-L1']:.5f}, L2 {means['unit-L2']:.5f}, "
                        f"L3 {means['unit-L3']:.5f}")
    assert in_budget


def test_fusion_experiment(capsys):
    rows = []
    all_ok = True
    for seed in range(5):
        spec = SyntheticTaskSpec(n_classes=8, seq_len=20, d_x=16, d_s=16,
                                 n_train=2000, n_val=400, noise_sigma=0.05,
                                 seed=seed)
        tr, va = generate_synthetic(spec)
        labels_tr = np.array([r.label for r in tr])
        app_clf = fit_linear_classifier(
            pooled_matrix([r.appearance for r in tr]), labels_tr, 8)
        flow_clf = fit_linear_classifier(
            pooled_matrix([r.flow_target for r in tr]), labels_tr, 8)
        labels_va = [r.label for r in va]
        p_app = [classify(r.appearance, app_clf) for r in va]
        p_flow = [classify(r.flow_target, flow_clf) for r in va]
        fused = [ensemble(a, f) for a, f in zip(p_app, p_flow)]
        acc_a = top1_accuracy(p_app, labels_va)
        acc_f = top1_accuracy(p_flow, labels_va)
        acc_e = top1_accuracy(fused, labels_va)
        seed_ok = acc_e >= acc_a - 0.01 and acc_e >= acc_f - 0.01
        all_ok &= seed_ok
        rows.append(f"s{seed} {acc_a:.3f}/{acc_f:.3f}/{acc_e:.3f}")
    verdict(capsys, "two-stream fusion", all_ok,
            "appearance/motion/ensemble top-1 per seed: " + ", ".join(rows))
    assert all_ok


def test_loss_and_schedule_exactness(capsys):
    rng = np.random.default_rng(23)
    n, t_len, d, c = 2, 3, 4, 5
    pred = rng.normal(size=(t_len, n, d))
    tgt = rng.normal(size=(t_len, n, d))
    p_pred = _np_softmax(rng.normal(size=(n, c)))
    p_tgt = _np_softmax(rng.normal(size=(n, c)))
    alpha = 10.0
    hand = 0.0
    for t in range(t_len):
        for i in range(n):
            for j in range(d):
                hand += (pred[t, i, j] - tgt[t, i, j]) ** 2
    hand /= n * t_len * d
    l1 = 0.0
    for i in range(n):
        for k in range(c):
            l1 += abs(p_pred[i, k] - p_tgt[i, k])
    hand += alpha * l1 / (n * c)
    loss = hallucination_loss([Tensor(pred[t]) for t in range(t_len)],
                              [Tensor(tgt[t]) for t in range(t_len)],
                              Tensor(p_pred), Tensor(p_tgt),
                              LossConfig(alpha=alpha, classifier="frozen")).item()
    loss_err = abs(loss - hand) / max(1.0, abs(hand))
    cfg = TrainConfig()
    lr15, lr30 = lr_at(15, cfg), lr_at(30, cfg)
    ok = loss_err <= 1e-12 and lr15 == 2e-5 and lr30 == 2e-6
    verdict(capsys, "loss and schedule exactness", ok,
            f"objective vs hand-summed oracle rel err {loss_err:.2e}; "
            f"rate at epoch 15 = {lr15} (exact), at 30 = {lr30} (exact)")
    assert ok


def test_determinism_and_round_trips(capsys, tmp_path):
    spec = SyntheticTaskSpec(n_classes=3, seq_len=8, d_x=6, d_s=4, n_train=24,
                             n_val=9, noise_sigma=0.05, seed=2)
    tr, va = generate_synthetic(spec)
    reports = []
    for _ in range(2):
        model = Hallucinator.build(CellConfig(family="monet", d_x=6, d_s=4,
                                              layers=2),
                                   np.random.default_rng(3))
        rep = train(model, tr, va,
                    TrainConfig(lr=3e-3, max_epochs=3, batch_size=8, seed=4),
                    LossConfig(alpha=0.0))
        reports.append(rep.to_json())
    same_reports = reports[0] == reports[1]

    data_path = str(tmp_path / "d.mofe")
    write_dataset(data_path, tr, n_classes=spec.n_classes)
    again = str(tmp_path / "d2.mofe")
    write_dataset(again, read_dataset(data_path), n_classes=spec.n_classes)
    mofe_exact = open(data_path, "rb").read() == open(again, "rb").read()

    ckpt = str(tmp_path / "m.monw")
    model.save(ckpt)
    loaded = Hallucinator.load(ckpt)
    ckpt2 = str(tmp_path / "m2.monw")
    loaded.save(ckpt2)
    ckpt_exact = open(ckpt, "rb").read() == open(ckpt2, "rb").read()
    values_exact = all(np.array_equal(a.data, b.data)
                       for a, b in zip(model.tensors(), loaded.tensors()))

    ok = same_reports and mofe_exact and ckpt_exact and values_exact
    verdict(capsys, "determinism and round trips", ok,
            f"repeated training reports identical: {same_reports}; dataset "
            f"file rewrite byte-identical: {mofe_exact}; checkpoint rewrite "
            f"byte-identical: {ckpt_exact} with values equal: {values_exact}")
    assert ok
