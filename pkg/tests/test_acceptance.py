"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criteria 7-10 share one trained synthetic model (plus the GEI-input arm)
built by a session fixture. The dataset and trained checkpoints are kept in
``.acceptance-cache/`` at the repository root (or ``GAITSET_ACCEPTANCE_CACHE``;
set it to an empty string to train in a temporary directory). A cached model
is reused only when its recorded configuration matches; a cached run is
reported as such and its training time is taken from the cached record.
"""

import dataclasses
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from gaitset import evaluate as E
from gaitset import network as N
from gaitset.dataio import SynthSpec, load_dataset, synth_generate
from gaitset.gradcheck import run_suite
from gaitset.metric import BatchSpec, TrainConfig, batch_all_triplet
from gaitset.network import GaitSetModel, NetworkConfig
from gaitset.pipeline import RunConfig, evaluate_split, train_on_split
from gaitset.setpool import SpStrategy
from gaitset.tensor import Tensor

from oracles import batch_all_enumeration, rank1_exhaustive, strip_pool_slices

# desk-scale training recipe shared by criteria 7-10
SYNTH = SynthSpec(identities=20, frames=40, seed=0, jitter=3.0, spread=0.15)
NETWORK = NetworkConfig.small()
TRAINING = TrainConfig(iterations=2000, lr=1e-3, seed=0, batch=BatchSpec(p=4, k=4, m=15), checkpoint_every=100)
TRAIN_BUDGET_S = 30 * 60


def report(capsys, number, title, passed, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}", flush=True)


# -- 1. permutation invariance --------------------------------------------------------------
def test_criterion_1_permutation_invariance(capsys):
    start = time.perf_counter()
    strategies = list(SpStrategy)
    worst = {s: 0.0 for s in strategies}
    for draw in range(100):
        rng = np.random.default_rng([1, draw])
        strategy = strategies[draw % len(strategies)]
        cfg = NetworkConfig.tiny(sp_strategy=strategy)
        model = GaitSetModel.initialize(cfg, seed=int(rng.integers(1 << 31)))
        for _ in range(100):
            n = int(rng.integers(1, 41))
            x = rng.random((n, cfg.input_height, cfg.input_width)).astype(np.float32)
            a, b = model.embed_many([x, x[rng.permutation(n)]])
            scale = max(float(np.abs(a).max()), 1e-30)
            worst[strategy] = max(worst[strategy], float(np.abs(a - b).max()) / scale)
    elapsed = time.perf_counter() - start
    exact_ok = worst[SpStrategy.MAX] == 0.0 and worst[SpStrategy.MEDIAN] == 0.0
    rel_ok = all(v <= 1e-6 for v in worst.values())
    passed = exact_ok and rel_ok and elapsed < 120
    detail = ", ".join(f"{s.value}={v:.2e}" for s, v in worst.items()) + f"; {elapsed:.1f}s"
    report(capsys, 1, "permutation invariance", passed, detail)
    assert passed


# -- 2. cardinality freedom -----------------------------------------------------------------
def test_criterion_2_cardinality(capsys):
    start = time.perf_counter()
    cfg = NetworkConfig()
    model = GaitSetModel.initialize(cfg, seed=0)
    rng = np.random.default_rng(2)
    shapes = {}
    for n in (1, 7, 30, 100):
        frames = (rng.random((n, 64, 44)) > 0.5).astype(np.float32)
        shapes[n] = model.embed_set(frames).shape
    elapsed = time.perf_counter() - start
    passed = all(s == (62, cfg.embed_dim) for s in shapes.values()) and elapsed < 60
    report(capsys, 2, "cardinality freedom", passed, f"shapes {shapes}; {elapsed:.1f}s")
    assert passed


# -- 3. gradient correctness ----------------------------------------------------------------
def test_criterion_3_gradients(capsys):
    start = time.perf_counter()
    results = run_suite(instances=50, seed=3)
    elapsed = time.perf_counter() - start
    ops = [r for r in results if not r.name.startswith("graph.")]
    graphs = [r for r in results if r.name.startswith("graph.")]
    op_err = max(r.max_error for r in ops)
    graph_err = max(r.max_error for r in graphs)
    passed = op_err < 1e-4 and graph_err < 1e-3 and elapsed < 300
    failed = [r.name for r in results if not r.passed]
    detail = f"{len(ops)} ops max {op_err:.2e}, {len(graphs)} graphs max {graph_err:.2e}; failed {failed}; {elapsed:.1f}s"
    report(capsys, 3, "gradient correctness", passed, detail)
    assert passed


# -- 4. loss oracle -------------------------------------------------------------------------
def test_criterion_4_loss_oracle(capsys):
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([4, i])
        p, k = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        strips, d = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        labels = np.repeat(rng.permutation(10)[:p], k)
        emb = rng.standard_normal((p * k, strips, d))
        margin = float(rng.uniform(0.0, 1.0))
        got = batch_all_triplet(Tensor(emb), labels, margin)
        want_total, want_frac, want_strips = batch_all_enumeration(emb, labels, margin)
        worst = max(worst, abs(got.loss - want_total), abs(got.nonzero_fraction - want_frac),
                    float(np.abs(np.asarray(got.per_strip) - np.asarray(want_strips)).max()))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-6 and elapsed < 60
    report(capsys, 4, "loss oracle equivalence", passed, f"max deviation {worst:.2e}; {elapsed:.1f}s")
    assert passed


# -- 5. HPM arithmetic ----------------------------------------------------------------------
def test_criterion_5_hpm(capsys):
    counts = {}
    worst = 0.0
    for s in range(1, 6):
        counts[s] = (NetworkConfig(scales=s).strips, None)
        rng = np.random.default_rng([5, s])
        feature = rng.standard_normal((3, 16, 11))
        got = N.strip_features(Tensor(feature[None]), s).data[0]
        counts[s] = (counts[s][0], got.shape[0])
        want = np.array(strip_pool_slices(feature, s))
        worst = max(worst, float(np.abs(got - want).max()))
    count_ok = all(c == g == 2**s - 1 for s, (c, g) in counts.items())
    passed = count_ok and worst <= 1e-6
    detail = f"strips {[g for _, g in counts.values()]} for S=1..5; slicing max deviation {worst:.2e}"
    report(capsys, 5, "HPM arithmetic", passed, detail)
    assert passed


# -- 6. retrieval oracle --------------------------------------------------------------------
def _store(emb, ids, views, tag):
    entries = [{"identity": i, "views": [v], "conditions": ["NM"], "sources": [f"{tag}/{n:03d}"], "frames": 1}
               for n, (i, v) in enumerate(zip(ids, views))]
    return E.EmbeddingStore(np.asarray(emb, np.float32)[:, None, :], entries)


def test_criterion_6_retrieval(capsys):
    rng = np.random.default_rng(6)
    n = 100
    views = ["000", "090", "180"]
    gids = [f"id{v}" for v in rng.integers(0, 12, n)]
    pids = [f"id{v}" for v in rng.integers(0, 12, n)]
    gviews = [views[v] for v in rng.integers(0, 3, n)]
    pviews = [views[v] for v in rng.integers(0, 3, n)]
    # integer coordinates on a small grid produce many exact distance ties
    gallery = _store(rng.integers(0, 3, (n, 3)), gids, gviews, "g")
    probe = _store(rng.integers(0, 3, (n, 3)), pids, pviews, "p")
    res = E.rank1(probe, gallery)
    mismatches = 0
    for j, gv in enumerate(res.gallery_views):
        cols = [c for c in range(n) if gviews[c] == gv]
        preds = rank1_exhaustive(probe.embeddings.reshape(n, -1), pids, gallery.embeddings.reshape(n, -1)[cols],
                                 [gids[c] for c in cols], [gallery.keys[c] for c in cols])
        correct = np.array(preds) == np.array(pids)
        for i, pv in enumerate(res.probe_views):
            rows = [r for r in range(n) if pviews[r] == pv]
            mismatches += res.accuracy[i, j] != 100.0 * correct[rows].mean()
    chance = []
    for seed in range(10):
        r = np.random.default_rng([60, seed])
        ids = [f"id{i}" for i in range(10)]
        g = _store(r.standard_normal((20, 16)), ids * 2, ["000"] * 10 + ["090"] * 10, "g")
        p = _store(r.standard_normal((200, 16)), ids * 20, ["000", "090"] * 100, "p")
        chance.append(E.rank1(p, g).mean)
    chance_mean = float(np.mean(chance))
    passed = mismatches == 0 and abs(chance_mean - 10.0) <= 3.0
    report(capsys, 6, "retrieval oracle", passed, f"{mismatches} cell mismatches vs oracle; chance {chance_mean:.2f}%")
    assert passed


# -- shared synthetic training (criteria 7-10) ----------------------------------------------
@dataclass
class Trained:
    split: object
    set_model: GaitSetModel
    gei_model: GaitSetModel
    set_seconds: float
    gei_seconds: float
    cached: bool
    root: Path


def _train_arm(split, network, work: Path, name: str, cache: bool):
    ckpt = work / f"{name}.ckpt"
    timing = work / f"{name}.seconds"
    run = RunConfig(str(work / "synth"), split.protocol.name, network, TRAINING, str(work))
    stamp = work / f"{name}.run"
    fingerprint = "\n".join(f"{k} = {v}" for k, v in run.to_dict().items()) + "\n" + SYNTH.to_text()
    if cache and ckpt.is_file() and stamp.is_file() and stamp.read_text() == fingerprint:
        return GaitSetModel.load(ckpt), float(timing.read_text()), True
    ckpt_dir = work / f"{name}-checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    start = time.perf_counter()
    model = train_on_split(split, network, TRAINING, work / f"{name}.log", ckpt_dir)
    seconds = time.perf_counter() - start
    model.save(ckpt)
    timing.write_text(f"{seconds:.3f}")
    stamp.write_text(fingerprint)
    return model, seconds, False


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    cache_dir = os.environ.get("GAITSET_ACCEPTANCE_CACHE", str(Path(__file__).resolve().parents[1] / ".acceptance-cache"))
    work = Path(cache_dir) if cache_dir else tmp_path_factory.mktemp("acceptance")
    work.mkdir(parents=True, exist_ok=True)
    root = work / "synth"
    spec_file = root / "synth-spec.txt"
    if not (spec_file.is_file() and spec_file.read_text() == SYNTH.to_text()):
        synth_generate(SYNTH, root)
    split = load_dataset(root, protocol="SYNTH").split
    set_model, set_s, c1 = _train_arm(split, NETWORK, work, "set", bool(cache_dir))
    gei_model, gei_s, c2 = _train_arm(split, NetworkConfig.small(gei_collapse=True), work, "gei", bool(cache_dir))
    return Trained(split, set_model, gei_model, set_s, gei_s, c1 and c2, work)


# -- 7. desk-scale training -----------------------------------------------------------------
def test_criterion_7_training_smoke(trained, capsys):
    _, _, set_res = evaluate_split(trained.set_model, trained.split)
    _, _, gei_res = evaluate_split(trained.gei_model, trained.split)
    set_nm, gei_nm = set_res["NM"].mean, gei_res["NM"].mean
    total = trained.set_seconds + trained.gei_seconds
    accuracy_ok = set_nm >= 90.0 and set_nm > gei_nm
    runtime_ok = total < TRAIN_BUDGET_S
    passed = accuracy_ok and runtime_ok
    detail = (
        f"set NM {set_nm:.2f}% (BG {set_res['BG'].mean:.2f}, CL {set_res['CL'].mean:.2f}) vs GEI NM {gei_nm:.2f}%; "
        f"accuracy {'ok' if accuracy_ok else 'not met'}; training {trained.set_seconds / 60:.1f}+"
        f"{trained.gei_seconds / 60:.1f} min vs {TRAIN_BUDGET_S / 60:.0f} min budget"
        f"{' (cached timing)' if trained.cached else ''}"
    )
    report(capsys, 7, "desk-scale training smoke", passed, detail)
    assert accuracy_ok, detail
    assert runtime_ok, detail


# -- 8. limited-frames monotonicity ---------------------------------------------------------
def test_criterion_8_frames_monotone(trained, capsys):
    budgets = (1, 3, 5, 7, 10, 15, 25, 40)
    rep = E.frames_sweep(trained.set_model, trained.split, budgets, seeds=10)
    means = [rep["mean"][b] for b in budgets]
    drops = [means[i] - means[i + 1] for i in range(len(means) - 1)]
    gain = means[-1] - means[0]
    passed = max(drops) <= 1.0 and gain >= 10.0
    detail = " ".join(f"{b}:{m:.1f}" for b, m in zip(budgets, means)) + f"; largest drop {max(drops):.2f}; gain {gain:.1f}"
    report(capsys, 8, "limited-frames monotonicity", passed, detail)
    assert passed


# -- 9. multi-view fusion -------------------------------------------------------------------
def test_criterion_9_multiview(trained, capsys):
    rep = E.multiview_sweep(trained.set_model, trained.split, per_view=5, seeds=10)
    passed = rep["two_view"] >= rep["single_view"]
    detail = f"two views 5+5 {rep['two_view']:.2f}% vs one view 10 frames {rep['single_view']:.2f}%"
    report(capsys, 9, "multi-view fusion", passed, detail)
    assert passed


# -- 10. determinism ------------------------------------------------------------------------
def test_criterion_10_determinism(trained, tmp_path, capsys):
    reference = trained.root / "set-checkpoints" / "checkpoint-0000100.ckpt"
    config = dataclasses.replace(TRAINING, iterations=100, checkpoint_every=0)
    again = train_on_split(trained.split, NETWORK, config)
    again.save(tmp_path / "again.ckpt")
    ckpt_same = reference.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    for name in ("a", "b"):
        E.embed_gallery(trained.set_model, trained.split).save(tmp_path / f"{name}.store")
    store_same = (tmp_path / "a.store").read_bytes() == (tmp_path / "b.store").read_bytes()
    passed = ckpt_same and store_same
    report(capsys, 10, "determinism", passed, f"checkpoints after 100 iterations identical: {ckpt_same}; stores identical: {store_same}")
    assert passed
