"""Acceptance suite: one PASS/FAIL line per criterion in the terminal summary."""

import contextlib
import math
import time
from collections import deque

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES, random_graph
from sharc import cli
from sharc.cluster import candidate_set, make_oracle, sharc_infer
from sharc.core import Dims, EmbeddingSet, dense_relabel
from sharc.data import RttmRecord, SynthConfig, labels_to_records, synth_generate
from sharc.gnn import forward, init_params
from sharc.metrics import der, pairwise_f1
from sharc.simgraph import aggregate, build_level0, similarity
from sharc.train import TrainConfig, build_training_hierarchy, grad_check_report, train


@contextlib.contextmanager
def criterion(number, title):
    """Record a PASS/FAIL line; the ``detail`` dict is appended to it."""
    detail = {}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException:
        status = "FAIL"
        raise
    else:
        status = "PASS"
    finally:
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"[{status}] {number}. {title} ({extra}; {time.perf_counter() - start:.1f}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)


# --- 1. gradient fidelity ------------------------------------------------------------


def test_criterion_1_gradient_fidelity():
    with criterion(1, "gradient fidelity") as d:
        t0 = time.perf_counter()
        cfg = SynthConfig(n_recordings=10, speakers_range=(2, 4), F=4, duration_range=(10.0, 20.0),
                          turn_length_range=(1.5, 6.0), seed=101)
        graphs = [build_training_hierarchy(es, 5)[0] for es in synth_generate(cfg)]
        params = init_params(4, Dims(8, 8, 8), seed=101, bias_scale=0.1)
        rep = grad_check_report(params, graphs, 110, step=1e-5, seed=101)
        elapsed = time.perf_counter() - t0
        d.update(graphs=len(graphs), coords=rep.checked, kinks=rep.skipped,
                 max_rel_err=f"{rep.max_rel_error:.2e}")
        assert len(graphs) >= 10
        assert rep.checked >= 1000
        assert rep.max_rel_error < 1e-4
        assert elapsed < 30.0


# --- 2. oracle inference ---------------------------------------------------------------


def _instance(seed):
    rng = np.random.default_rng(seed)
    n_clusters = int(rng.integers(2, 11))
    n = int(rng.integers(20, 201))
    f = 16
    cents = rng.normal(size=(n_clusters, f))
    cents /= np.linalg.norm(cents, axis=1, keepdims=True)
    base = np.repeat(np.arange(n_clusters), 2)
    labels = np.concatenate([base, rng.integers(0, n_clusters, n - base.size)])
    rng.shuffle(labels)
    x = cents[labels] + rng.normal(scale=0.05, size=(n, f))
    return EmbeddingSet(f"inst{seed}", x, labels=labels)


def _bfs_partition(labels):
    """Components of the graph linking every same-label pair, by flood fill."""
    n = len(labels)
    comp = -np.ones(n, dtype=int)
    c = 0
    for s in range(n):
        if comp[s] >= 0:
            continue
        comp[s] = c
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in range(n):
                if comp[v] < 0 and labels[v] == labels[u]:
                    comp[v] = c
                    queue.append(v)
        c += 1
    return comp


def test_criterion_2_oracle_inference():
    with criterion(2, "oracle inference recovers ground truth") as d:
        k = 10
        recovered = 0
        for seed in range(100):
            es = _instance(seed)
            g0 = build_level0(es, k)
            # precondition: every node has a same-cluster kNN neighbour and
            # no cross-cluster tie at the kNN boundary
            same = es.labels[g0.neighbors] == es.labels[:, None]
            assert same.any(axis=1).all()
            full = similarity(es.embeddings)
            np.fill_diagonal(full, -np.inf)
            ranked = -np.sort(-full, axis=1)
            assert np.all(ranked[:, k - 1] > ranked[:, k])
            h = sharc_infer(es, make_oracle(es.labels), k, 0.5)
            truth = _bfs_partition(es.labels)
            recovered += int(np.array_equal(dense_relabel(truth), dense_relabel(h.final_labels)))
        d.update(recovered=f"{recovered}/100")
        assert recovered == 100


# --- 3 and 4. trained model on held-out recordings --------------------------------------

TRAIN_CFG = TrainConfig(learning_rate=0.1, epochs=150, batch_size=1, k=30, seed=0,
                        dims=Dims(64, 128, 32), augment_rotation=True)
INFER_K, INFER_P_TAU = 10, 0.8


@pytest.fixture(scope="module")
def heldout():
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        sets = synth_generate(SynthConfig(n_recordings=70, speakers_range=(3, 8), F=16,
                                          spread=0.3, seed=2024))
        params, _ = train(sets[:50], TRAIN_CFG)
        results = [(es, sharc_infer(es, params, INFER_K, INFER_P_TAU)) for es in sets[50:]]
        elapsed = time.perf_counter() - t0
    return results, elapsed


def test_criterion_3_trained_quality(heldout):
    with criterion(3, "trained-model quality") as d:
        results, elapsed = heldout
        f1 = np.mean([pairwise_f1(es.labels, h.final_labels) for es, h in results])
        ref, hyp = [], []
        for es, h in results:
            ref += labels_to_records(es.labels, es.segments, es.recording_id)
            hyp += labels_to_records(h.final_labels, es.segments, es.recording_id)
        rate = der(ref, hyp)
        d.update(mean_f1=f"{f1:.4f}", der=f"{rate:.2f}%", runtime=f"{elapsed:.0f}s")
        assert f1 >= 0.95
        assert rate <= 5.0
        assert elapsed < 300.0


def test_criterion_4_convergence_depth(heldout):
    with criterion(4, "convergence depth") as d:
        results, _ = heldout
        depths = [h.depth for _, h in results]
        stops = sorted({h.stopped_by for _, h in results})
        d.update(max_depth=max(depths), stops="/".join(stops))
        assert max(depths) <= 3
        assert "max-levels" not in stops


# --- 5. metrics ----------------------------------------------------------------------------


def _rec(on, off, spk):
    return RttmRecord("r", on, off - on, spk)


def _brute_f1(t, p):
    tp = fp = fn = 0
    for i in range(len(t)):
        for j in range(i + 1, len(t)):
            a, b = t[i] == t[j], p[i] == p[j]
            tp += a and b
            fp += b and not a
            fn += a and not b
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def test_criterion_5_metric_correctness():
    with criterion(5, "metric correctness") as d:
        ref = [_rec(0, 10, "A")]
        hyp = [_rec(0, 9, "x"), _rec(9, 10, "y")]
        got = [der(ref, ref), der(ref, hyp), der(ref, hyp, collar=0.25)]
        want = [0.0, 10.0, 0.5 / 9.0 * 100.0]
        assert all(abs(g - w) <= 1e-9 for g, w in zip(got, want)), got

        rng = np.random.default_rng(55)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 13))
            t = rng.integers(0, rng.integers(1, n + 1), n)
            p = rng.integers(0, rng.integers(1, n + 1), n)
            worst = max(worst, abs(pairwise_f1(t, p) - _brute_f1(t, p)))
        d.update(der=[round(g, 6) for g in got], f1_max_diff=worst)
        assert worst <= 1e-12


# --- 6. formula unit checks ----------------------------------------------------------------


def _cos01(a, b):
    return (sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b)) + 1) / 2


def _brute_aggregate(graph, clusters, dens):
    f = graph.feature_dim
    ident = graph.node_features[:, :f]
    peaks, means = [], []
    for c in range(clusters.max() + 1):
        members = [i for i in range(graph.n) if clusters[i] == c]
        best = members[0]
        for i in members[1:]:
            if dens[i] > dens[best]:
                best = i
        peaks.append(best)
        means.append([sum(ident[i, col] for i in members) / len(members) for col in range(f)])
    feats = [list(ident[p]) + m for p, m in zip(peaks, means)]
    m = len(feats)
    nbrs = []
    for i in range(m):
        order = sorted((j for j in range(m) if j != i), key=lambda j: (-_cos01(feats[i][:f], feats[j][:f]), j))
        nbrs.append(order[: min(graph.k, m - 1)])
    return np.array(feats), nbrs


def test_criterion_6_formula_checks():
    with criterion(6, "formula unit checks") as d:
        rng = np.random.default_rng(66)
        checked = 0
        for _ in range(1000):
            n = int(rng.integers(2, 21))
            deg = int(rng.integers(1, min(5, n - 1) + 1))
            g = random_graph(rng, n, deg, f=3)
            params = init_params(3, Dims(4, 4, 3), seed=int(rng.integers(1 << 30)), bias_scale=0.5)
            trace = forward(g, params)
            s = trace.scores
            p_tau = float(rng.uniform(0.3, 0.7))
            mask = candidate_set(g, s, p_tau)
            for i in range(n):
                acc = 0.0
                for slot in range(deg):
                    l0, l1 = trace.logits[i * deg + slot]
                    p = math.exp(l1) / (math.exp(l0) + math.exp(l1))
                    assert s.linkage_prob[i, slot] == pytest.approx(p, abs=1e-12)
                    assert s.edge_weight[i, slot] == pytest.approx(2 * p - 1, abs=1e-12)
                    acc += (2 * p - 1) * g.edge_similarity[i, slot]
                assert s.density[i] == pytest.approx(acc / deg, abs=1e-12)
                for slot in range(deg):
                    j = g.neighbors[i, slot]
                    want = s.density[i] <= s.density[j] and s.linkage_prob[i, slot] >= p_tau
                    assert mask[i, slot] == want

            clusters = dense_relabel(rng.integers(0, int(rng.integers(1, n + 1)), n))
            nxt = aggregate(g, clusters, s.density)
            feats, nbrs = _brute_aggregate(g, clusters, s.density)
            np.testing.assert_allclose(nxt.node_features, feats, atol=1e-12)
            for i, row in enumerate(nbrs):
                assert list(nxt.neighbors[i]) == row
            checked += 1
        d.update(graphs=checked)
        assert checked == 1000


# --- 7. determinism and scaling ------------------------------------------------------------


def _cli(*argv):
    assert cli.main([str(a) for a in argv]) == 0


def test_criterion_7_determinism_and_scaling(tmp_path):
    with criterion(7, "determinism and scaling") as d:
        data_dir = tmp_path / "data"
        _cli("synth", "--out", data_dir, "--n-recordings", 6, "--speakers", 2, 4,
             "--dim", 8, "--duration", 20, 40, "--seed", 7)
        outputs = {}
        for threads in (1, 8):
            ckpt = tmp_path / f"model{threads}.ckpt"
            log = tmp_path / f"log{threads}.jsonl"
            rttm = tmp_path / f"hyp{threads}.rttm"
            _cli("--threads", threads, "train", data_dir, "--out", ckpt, "--log", log,
                 "--epochs", 4, "--batch-size", 2, "--k", 5, "--dims", 8, 8, 8, "--lr", 0.1)
            _cli("--threads", threads, "infer", data_dir, "--checkpoint", ckpt, "--out", rttm,
                 "--k", 5, "--p-tau", 0.5)
            outputs[threads] = [ckpt.read_bytes(), log.read_bytes(), rttm.read_bytes()]
        identical = outputs[1] == outputs[8]
        assert identical

        cfg = SynthConfig(n_recordings=1, speakers_range=(8, 8), F=64, duration_range=(2600, 2600), seed=3)
        es = synth_generate(cfg)[0]
        es = EmbeddingSet(es.recording_id, es.embeddings[:3000], es.segments[:3000], es.labels[:3000])
        params = init_params(64, Dims(), seed=0)
        with threadpool_limits(limits=1):
            t0 = time.perf_counter()
            sharc_infer(es, params, 60, 0.5)
            elapsed = time.perf_counter() - t0
        d.update(identical=identical, N=es.n, infer=f"{elapsed:.2f}s")
        assert es.n == 3000
        assert elapsed < 10.0
