"""Acceptance suite: one PASS/FAIL/BLOCKED line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are printed
even while pytest captures output. ACCEPT_EPOCHS shortens the
end-to-end training for quick local runs (default 200, the library default).
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from scadavae import cli, dataio, detector, evaluation as ev, rulecheck, synthgen, training, vae
from scadavae import diffcore as dc

from conftest import dyadic
from oracles.adam_table import first_step as adam_first_step_oracle
from test_evaluation import concordance, naive_best_f1, random_instance
from test_kernels import naive_conv, naive_dense, naive_pool
from test_vae import small_model

EPOCHS = int(os.environ.get("ACCEPT_EPOCHS", "200"))


def verdict(capsys, n, ok, detail, status=None):
    status = status or ("PASS" if ok else "FAIL")
    with capsys.disabled():
        print(f"\nC{n} {status}  {detail}")
    assert ok, f"criterion {n}: {detail}"


def _weighted(out, r, t):
    return dc.sum(dc.mul(out, dc.Tensor(r), t), tape=t)


def _layer_cases(rng):
    x2 = dc.Parameter(rng.standard_normal((4, 5)))
    W, b = dc.Parameter(rng.standard_normal((5, 3))), dc.Parameter(rng.standard_normal(3))
    r2 = rng.standard_normal((4, 3))
    yield "dense", lambda t: _weighted(dc.dense_apply(x2, W, b, t), r2, t), [x2, W, b]
    x3 = dc.Parameter(rng.standard_normal((2, 3, 8)))
    w, cb = dc.Parameter(rng.standard_normal((4, 3, 3))), dc.Parameter(rng.standard_normal(4))
    r3 = rng.standard_normal((2, 4, 8))
    yield "conv1d", lambda t: _weighted(dc.conv1d_apply(x3, w, cb, t), r3, t), [x3, w, cb]
    rp = rng.standard_normal((2, 3, 4))
    yield "maxpool", lambda t: _weighted(dc.maxpool1d_apply(x3, 2, t), rp, t), [x3]
    xu = dc.Parameter(rng.standard_normal((2, 3, 4)))
    ru = rng.standard_normal((2, 3, 8))
    yield "upscale", lambda t: _weighted(dc.upscale1d_apply(xu, 2, t), ru, t), [xu]
    g, be = dc.Parameter(rng.standard_normal(3)), dc.Parameter(rng.standard_normal(3))
    state = dc.BatchNormState(rng.standard_normal(3), rng.uniform(0.5, 2, 3))
    rb = rng.standard_normal((2, 3, 8))
    for mode in ("train", "infer"):
        yield (f"batchnorm-{mode}",
               lambda t, mode=mode: _weighted(
                   dc.batchnorm_apply(x3, g, be, state, mode, t, update_stats=False), rb, t),
               [x3, g, be])
    ra = rng.standard_normal((4, 5))
    for kind in ("relu", "tanh", "identity"):
        yield kind, lambda t, kind=kind: _weighted(dc.activation_apply(x2, kind, t), ra, t), [x2]


def test_c1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    worst = {}
    for point in range(10):
        rng = np.random.default_rng(1000 + point)
        for name, build, params in _layer_cases(rng):
            worst[name] = max(worst.get(name, 0.0), dc.finite_diff_check(build, params))
        m = small_model(point)
        x = rng.standard_normal((4, 3, 8))
        noise = rng.standard_normal((4, 2))
        err = dc.finite_diff_check(lambda t: vae.elbo(m, x, noise, t, update_stats=False),
                                   m.parameters())
        worst["elbo"] = max(worst.get("elbo", 0.0), err)
    secs = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and secs < 60
    verdict(capsys, 1, ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} graphs "
                           f"x 10 points, {secs:.1f}s")


def test_c2_closed_forms(capsys):
    kl = float(vae.kl_diag_gaussian(vae.GaussianLatent(dc.Tensor([[1.0]]), dc.Tensor([[0.0]]))).data[0])
    logp = float(vae.gaussian_log_density(np.zeros((1, 1)), np.zeros((1, 1)),
                                        np.zeros((1, 1))).data[0])
    p = dc.Parameter(np.array([0.0]), "w")
    p.grad = np.array([0.1])
    training.adam_step([p], training.AdamState())
    step = float(p.data[0])
    formula = adam_first_step_oracle(0.1)  # -alpha * g / (|g| + eps)
    literal = -9.99999990e-4
    ok = (abs(kl - 0.5) <= 1e-12 and abs(logp + 0.5 * math.log(2 * math.pi)) <= 1e-12
          and abs(logp - (-0.918938533204672)) <= 1e-12 and abs(step - formula) <= 1e-12)
    verdict(capsys, 2, ok, f"KL {kl!r}, log N(0;0,1) {logp!r}, Adam step {step!r} "
                           f"(formula {formula!r}; rounded literal {literal!r} differs by "
                           f"{abs(step - literal):.1e})")


def test_c3_oracles(capsys):
    rng = np.random.default_rng(2024)
    auc_gap = 0.0
    for _ in range(100):
        lrp, labels = random_instance(rng)
        auc_gap = max(auc_gap, abs(ev.roc(lrp, labels).auc - concordance(lrp, labels)))
    f1_same = all(ev.optimal_threshold_f1(lrp, labels) == naive_best_f1(list(lrp), list(labels))
                  for lrp, labels in (random_instance(rng) for _ in range(100)))
    exact = True
    for _ in range(5):
        x = dyadic(rng, (3, 4, 12))
        w, b = dyadic(rng, (5, 4, 3)), dyadic(rng, (5,))
        exact &= np.array_equal(dc.conv1d_apply(x, dc.Tensor(w), dc.Tensor(b)).data,
                                naive_conv(x, w, b))
        xd, Wd, bd = dyadic(rng, (5, 7)), dyadic(rng, (7, 3)), dyadic(rng, (3,))
        exact &= np.array_equal(dc.dense_apply(xd, dc.Tensor(Wd), dc.Tensor(bd)).data,
                                naive_dense(xd, Wd, bd))
        xp = dyadic(rng, (2, 3, 12), -4, 4)
        exact &= np.array_equal(dc.maxpool1d_apply(xp, 2).data, naive_pool(xp, 2)[0])
    ok = auc_gap <= 1e-12 and f1_same and exact
    verdict(capsys, 3, ok, f"AUC vs concordance max gap {auc_gap:.1e}; F1 enumeration identical "
                           f"{f1_same}; conv/dense/pool bit-exact {exact}")


# --------------------------------------------------------------------------
# synthetic end-to-end (shared by 4, 5, 7)
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e():
    sc = synthgen.default_scenario()
    data = sc.generate()
    t0 = time.perf_counter()
    stats = dataio.fit_stats(data.train)
    model = vae.VaeModel(vae.VaeConfig(channels=len(data.train.channel_names), seed=0),
                         data.train.channel_names, stats.mean, stats.std)
    batch = detector.windows_for(model, data.train)
    training.fit(model, batch.windows, config=training.TrainConfig(epochs=EPOCHS), seed=0)
    ab = detector.windows_for(model, data.attack)
    attack = detector.score_series(model, ab)
    base = detector.score_series(model, detector.windows_for(model, data.baseline))
    secs = time.perf_counter() - t0
    end_hour = np.arange(len(data.attack))[23:]
    return dict(scenario=sc, data=data, model=model, attack=attack, labels=ab.labels,
                baseline=base, end_hour=end_hour, seconds=secs)


def test_c4_synthetic_end_to_end(capsys, e2e):
    lrp, y = e2e["attack"].lrp, e2e["labels"]
    auc = ev.roc(lrp, y).auc
    ma, mn = lrp[y == 1].mean(), lrp[y == 0].mean()
    n_ch = len(e2e["data"].train.channel_names)
    ok = auc >= 0.85 and ma < mn and e2e["seconds"] <= 600 and 6 <= n_ch <= 12
    verdict(capsys, 4, ok, f"AUC {auc:.4f}, mean LRP attack {ma:.1f} < normal {mn:.1f}, "
                           f"{n_ch} channels, {EPOCHS} epochs, {e2e['seconds']:.0f}s")


def test_c5_post_attack_transient(capsys, e2e):
    lrp, h = e2e["attack"].lrp, e2e["end_hour"]
    inside = np.zeros(len(h), bool)
    post = np.zeros(len(h), bool)
    parts = []
    for a in e2e["scenario"].attacks:
        i = (h >= a.start) & (h < a.end)
        p = (h >= a.end) & (h < a.end + 24)
        inside |= i
        post |= p
        parts.append(f"{a.pump}@{a.start}: {lrp[i].mean():.0f}/{lrp[p].mean():.0f}")
    m_in, m_post, m_steady = lrp[inside].mean(), lrp[post].mean(), e2e["baseline"].lrp.mean()
    ok = m_in < m_post < m_steady
    verdict(capsys, 5, ok, f"attack {m_in:.1f} < post-attack {m_post:.1f} < steady {m_steady:.1f} "
                           f"(per attack in/post: {'; '.join(parts)})")


def test_c7_rule_baseline(capsys, e2e):
    sc, data = e2e["scenario"], e2e["data"]
    meta = rulecheck.NetworkMeta.from_dict(synthgen.network_meta(sc.network))
    clean = sum(int(rulecheck.run_rules(ds, meta).combined.sum())
                for ds in (data.train, data.baseline))
    flags = rulecheck.run_rules(data.attack, meta, back_hours=48)
    tank = np.flatnonzero(flags.families["tank_limit"])
    overflow = [a for a in sc.attacks if a.rule == "off_above"]
    inside = tank.size > 0 and all(any(a.start < t < a.end for a in overflow) for t in tank)
    raw = flags.combined
    naive = np.array([raw[t:t + 49].any() for t in range(len(raw))])
    smooth_ok = np.array_equal(flags.smoothed, naive)
    early = [a for a in sc.attacks if a.rule == "on_below"][0]
    blind = int(raw[early.start:early.end].sum())
    lrp, y, h = e2e["attack"].lrp, e2e["labels"], e2e["end_hour"]
    sel = ((h >= early.start) & (h < early.end)) | (y == 0)
    auc3 = ev.roc(lrp[sel], y[sel]).auc
    ok = clean == 0 and inside and smooth_ok and blind == 0 and auc3 > 0.8
    verdict(capsys, 7, ok, f"clean flags {clean}; {tank.size} tank-limit flags inside overflow "
                           f"attacks {inside}; 48h smoothing exact {smooth_ok}; early-activation "
                           f"attack rule flags {blind}, VAE AUC {auc3:.4f}")


# --------------------------------------------------------------------------
# BATADAL
# --------------------------------------------------------------------------

BATADAL_TRAIN = "BATADAL_dataset03.csv"
BATADAL_TEST = "BATADAL_test_dataset.csv"


def _runs(labels):
    idx = np.flatnonzero(labels == 1)
    if idx.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(idx) > 1) + 1
    return [(r[0], r[-1] + 1) for r in np.split(idx, cuts)]


def test_c6_batadal(capsys):
    root = os.environ.get("BATADAL_DIR")
    if not root or not (Path(root) / BATADAL_TRAIN).exists() or not (Path(root) / BATADAL_TEST).exists():
        with capsys.disabled():
            print(f"\nC6 BLOCKED  set BATADAL_DIR to a folder holding {BATADAL_TRAIN} and "
                  f"a labeled {BATADAL_TEST} (ATT_FLAG column); the data cannot be fetched here")
        pytest.skip("BATADAL data not available")
    t0 = time.perf_counter()
    train = dataio.load_csv(Path(root) / BATADAL_TRAIN, dataio.BATADAL_COLUMNS)
    test = dataio.load_csv(Path(root) / BATADAL_TEST, dataio.BATADAL_COLUMNS).select(
        train.channel_names)
    stats = dataio.fit_stats(train)
    model = vae.VaeModel(vae.VaeConfig(channels=len(train.channel_names), seed=0),
                         train.channel_names, stats.mean, stats.std)
    training.fit(model, detector.windows_for(model, train).windows, seed=0)
    normal = detector.score_series(model, detector.windows_for(model, train))
    tb = detector.windows_for(model, test)
    scored = detector.score_series(model, tb)
    auc = ev.roc(scored.lrp, tb.labels).auc
    t_q = detector.quantile_threshold(normal, 0.01)
    end = np.arange(len(test))[23:]
    hits = []
    for s, e in _runs(test.labels)[:5]:
        sel = (end >= s) & (end < e + 23)
        hits.append(bool((scored.lrp[sel] < t_q).any()))
    secs = time.perf_counter() - t0
    ok = auc >= 0.79 and len(hits) == 5 and all(hits) and secs <= 3600
    verdict(capsys, 6, ok, f"AUC {auc:.4f}; attacks 1-5 flagged at q0.01 threshold {t_q:.1f}: "
                           f"{hits}; {secs:.0f}s")


# --------------------------------------------------------------------------
# determinism
# --------------------------------------------------------------------------

def test_c8_determinism_and_persistence(capsys, tmp_path):
    sc = synthgen.default_scenario()
    sc.train_hours, sc.attack_hours = 480, 240
    sc.attacks = [synthgen.AttackSpec(100, 48, "PU1", "off_above", 5.0)]
    (tmp_path / "sc.json").write_text(__import__("json").dumps(sc.to_dict()))
    (tmp_path / "cfg.json").write_text('{"train": {"epochs": 3}}')
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        args = ["--out", str(out), "--seed", "11"]
        assert cli.main(["gen", "--scenario", str(tmp_path / "sc.json")] + args) == 0
        assert cli.main(["train", str(out / "train.csv"), "--config", str(tmp_path / "cfg.json")]
                        + args) == 0
        assert cli.main(["score", str(out / "model.svm"), str(out / "attack.csv")] + args) == 0
        blobs.append(((out / "model.svm").read_bytes(), (out / "lrp.csv").read_bytes()))
    same = blobs[0] == blobs[1]
    model = vae.load_model(tmp_path / "a" / "model.svm")
    ds = dataio.load_csv(tmp_path / "a" / "attack.csv", dataio.ColumnMap(label="label"))
    windows = detector.windows_for(model, ds).windows
    before = vae.lrp(model, windows)
    vae.save_model(model, tmp_path / "copy.svm")
    after = vae.lrp(vae.load_model(tmp_path / "copy.svm"), windows)
    gap = float(np.abs(before - after).max())
    ok = same and gap <= 1e-12
    verdict(capsys, 8, ok, f"model files and LRP CSVs bit-identical {same}; save/load LRP gap "
                           f"{gap:.1e}")
