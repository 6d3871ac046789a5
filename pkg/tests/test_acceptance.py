"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import math
import time

import numpy as np
import pytest

from matprobe import dataio as dio
from matprobe import evaluation as ev
from matprobe import experiments as ex
from matprobe import hiergat as hg
from matprobe import numerics as nm
from matprobe import probe as pb
from matprobe import taxonomy as tx
from matprobe.renderer import (
    RenderSample,
    SensorModel,
    SpatialTransform,
    ThinLens,
    add_noise,
    render_novel_view,
)
from conftest import make_taxonomy


def report(name: str, ok: bool, detail: str):
    print(f"ACCEPTANCE [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def warm_renderer():
    # warm the JIT cache so timed renders measure tracing, not compilation
    s = RenderSample.with_fov(np.full((16, 16, 3), 0.5), np.full((16, 16), 0.3, np.float32))
    render_novel_view(s, SpatialTransform.identity(), ThinLens(0.3), SensorModel(),
                      render_size=16, target_size=16, spp=1)


def test_gradient_oracle():
    tree = make_taxonomy([2, 2])  # 7 nodes
    cfg = hg.GatConfig(input_dim=6, hidden_dim=5, output_dim=4, layers=2)
    model = hg.HierGatModel.create(tree, cfg, seed=13)
    feats = np.random.default_rng(21).normal(size=(2, 6))
    leaves = list(tree.leaves())
    labels = [tx.label_of(tree, leaves[0]), tx.label_of(tree, leaves[3])]

    def f():
        return hg.hierarchical_loss(hg.forward(model, feats), labels, model.graph)

    t0 = time.time()
    result = nm.grad_check(f, model.parameters(), step=1e-5, tolerance=1e-4)
    elapsed = time.time() - t0
    ok = result["__max__"] < 1e-4 and elapsed < 60.0
    report(
        "gradient-oracle",
        ok,
        f"max rel err {result['__max__']:.2e} over {len(model.parameters())} "
        f"parameters in {elapsed:.1f}s",
    )


def test_loss_identities():
    tree = tx.default_taxonomy()
    graph = tx.to_graph(tree)
    leaves = tree.material_leaves()
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(1000):
        z = rng.normal(scale=3.0, size=graph.num_nodes)
        label = tx.label_of(tree, leaves[rng.integers(len(leaves))])
        total = hg.hierarchical_loss(nm.Tensor(z), label, graph).item()
        multihot = np.zeros(graph.num_nodes)
        for nid in label.path:
            multihot[graph.index_of(nid)] = 1.0
        bce = nm.bce_with_logits(nm.Tensor(z), multihot).item()
        ce = sum(
            nm.cross_entropy(
                nm.Tensor(z[list(m)]), m.index(graph.index_of(label.path[d]))
            ).item()
            for d, m in enumerate(graph.level_members)
        ) / len(graph.level_names)
        if total < bce - 1e-12 or total < ce - 1e-12:
            violations += 1

    label = tx.label_of(tree, "steel")
    got = hg.hierarchical_loss(nm.Tensor(np.zeros(graph.num_nodes)), label, graph).item()
    counts = [len(m) for m in graph.level_members]
    want = max(math.log(2.0), sum(math.log(k) for k in counts) / 5.0)
    closed_form_err = abs(got - want)
    ok = violations == 0 and closed_form_err < 1e-9
    report(
        "loss-identities",
        ok,
        f"{violations}/1000 bound violations; steel closed-form error {closed_form_err:.1e}",
    )


def test_renderer_identity_oracle(warm_renderer):
    size = 512
    tex = np.random.default_rng(7).random((size, size, 3))
    sample = RenderSample.with_fov(tex, np.full((size, size), 0.3, np.float32))
    t0 = time.time()
    view = render_novel_view(
        sample, SpatialTransform.identity(), ThinLens(0.3), SensorModel(),
        seed=0, render_size=size, target_size=size, spp=1,
    )
    elapsed = time.time() - t0
    sl = (slice(8, -8), slice(8, -8))
    mse = np.mean((view.image[sl] - tex[sl]) ** 2)
    psnr = np.inf if mse == 0 else 10 * np.log10(1.0 / mse)
    ok = psnr >= 40.0 and elapsed < 60.0
    report("renderer-identity", ok, f"interior PSNR {psnr:.1f} dB, {elapsed:.1f}s at 512^2/1spp")


def test_renderer_geometry(warm_renderer):
    size = 256
    tex = np.full((size, size, 3), 0.05)
    tex[size // 2 - 40 : size // 2 + 40, size // 2 - 40 : size // 2 + 40] = 1.0
    d0 = 0.4
    sample = RenderSample.with_fov(tex, np.full((size, size), d0, np.float32))

    def extent(scale):
        tr = SpatialTransform(np.eye(3), np.array([0, 0, d0 * (scale - 1.0)]), 1.0)
        v = render_novel_view(
            sample, tr, ThinLens(d0 * scale), SensorModel(), seed=0,
            render_size=size, target_size=size, spp=1, background=0.05,
        )
        return int(np.sum(v.image[size // 2, :, 0] > 0.5))

    extents = [extent(s) for s in (1.0, 2.0, 4.0)]
    halving_ok = all(abs(extents[i + 1] - extents[i] / 2) <= 1 for i in range(2))

    edge = np.zeros((size, size, 3))
    edge[:, size // 2 :] = 1.0
    esample = RenderSample.with_fov(edge, np.full((size, size), d0, np.float32))

    def spread(focus):
        v = render_novel_view(
            esample, SpatialTransform.identity(), ThinLens(focus, 0.02), SensorModel(),
            seed=3, render_size=size, target_size=size, spp=64, background=0.0,
        )
        row = v.image[size // 2, :, 0]

        def crossing(level):
            i = np.nonzero(row >= level)[0][0]
            return i - 1 + (level - row[i - 1]) / (row[i] - row[i - 1] + 1e-12)

        return crossing(0.9) - crossing(0.1)

    widths = [float(spread(d0 + off)) for off in (0.0, 0.1, 0.3, 0.9)]
    monotone_ok = all(widths[i] < widths[i + 1] for i in range(len(widths) - 1))
    ok = halving_ok and monotone_ok
    report(
        "renderer-geometry",
        ok,
        f"extents {extents} px (halving within 1 px: {halving_ok}); "
        f"edge spreads {[round(w, 2) for w in widths]} px (monotone: {monotone_ok})",
    )


def test_noise_statistics():
    img = np.ones((400, 250))  # 1e5 pixels
    sensor = SensorModel(read_noise=0.1, photon_gain=0.0)
    noise = add_noise(img, sensor, seed=7) - img
    var = float(noise.var())
    se = 0.1 / np.sqrt(img.size)
    var_ok = abs(var - 0.01) / 0.01 < 0.05
    mean_ok = abs(float(noise.mean())) < 3 * se
    ok = var_ok and mean_ok
    report(
        "noise-statistics",
        ok,
        f"variance {var:.5f} (target 0.01 +-5%), |mean| {abs(noise.mean()):.2e} "
        f"< 3se={3*se:.2e}",
    )


def test_end_to_end_learning(tmp_path):
    t0 = time.time()
    res = ex.end_to_end_learning(tmp_path, seed=0, per_leaf=40, epochs=50)
    elapsed = time.time() - t0
    leaf_acc = res["per_level_top1"][-1]
    coarser_ok = all(a >= leaf_acc for a in res["per_level_top1"][:-1])
    ok = res["test_flat_top1"] >= 0.90 and coarser_ok and elapsed < 600.0
    report(
        "end-to-end-learning",
        ok,
        f"test flat top-1 {res['test_flat_top1']:.3f}, per-level "
        f"{[round(a, 3) for a in res['per_level_top1']]}, {elapsed:.0f}s",
    )


def test_novel_view_generalization(tmp_path):
    res = ex.novel_view_study(tmp_path, seed=0)
    ok = res["gain_points"] >= 3.0
    report(
        "novel-view-generalization",
        ok,
        f"accuracy {res['accuracy_without_views']:.3f} -> {res['accuracy_with_views']:.3f} "
        f"on rendered poses (gain {res['gain_points']:.1f} points, need >= 3)",
    )


def test_few_shot_harness(tmp_path):
    res = ex.few_shot_study(tmp_path, seed=0, counts=(1, 2, 4, 8, 16))
    curve = res["curve"]
    accs = [r["accuracy"] for r in curve]
    inversions = [
        max(0.0, accs[i] - accs[i + 1]) for i in range(len(accs) - 1)
    ]
    big = [d for d in inversions if d > 1e-9]
    monotone_ok = len(big) <= 1 and all(d <= 0.02 + 1e-9 for d in big)
    hops16 = [r["path_distance"] for r in curve if r["n"] == 16][0]
    ok = monotone_ok and hops16 <= 2.0
    report(
        "few-shot-harness",
        ok,
        f"held-out accuracy {[round(a, 2) for a in accs]} over n={[r['n'] for r in curve]}, "
        f"path distance at n=16: {hops16:.2f} hops",
    )


def test_probe_consistency():
    tree = tx.default_taxonomy()
    graph = tx.to_graph(tree)
    rng = np.random.default_rng(0)

    def random_dist():
        mean = np.empty(graph.num_nodes)
        for members in graph.level_members:
            p = rng.dirichlet(np.ones(len(members)))
            mean[list(members)] = p
        return pb.PredictionDistribution(
            graph.node_ids, mean, rng.random(graph.num_nodes) * 0.1,
            np.zeros(len(graph.level_names)),
        )

    invalid = 0
    for _ in range(10_000):
        pred = pb.best_first_classify(random_dist(), tree, threshold=rng.random())
        if pred.path[0] != tree.root:
            invalid += 1
            continue
        for parent, child in zip(pred.path, pred.path[1:]):
            if tree.nodes[child].parent != parent:
                invalid += 1
                break

    non_monotone = 0
    for _ in range(1000):
        dist = random_dist()
        lengths = [
            len(pb.best_first_classify(dist, tree, threshold=t).path)
            for t in (0.0, 0.25, 0.5, 0.75, 1.0)
        ]
        if any(lengths[i] < lengths[i + 1] for i in range(len(lengths) - 1)):
            non_monotone += 1

    ok = invalid == 0 and non_monotone == 0
    report(
        "probe-consistency",
        ok,
        f"{invalid}/10000 invalid chains; {non_monotone}/1000 non-monotone threshold sweeps",
    )


def test_taxonomy_metric():
    tree = tx.default_taxonomy()
    ids = tree.preorder
    n = len(ids)
    d = np.empty((n, n), dtype=int)
    for i, a in enumerate(ids):
        for j, b in enumerate(ids):
            d[i, j] = tx.path_distance(tree, a, b)
    sym = np.array_equal(d, d.T)
    nonneg = bool((d >= 0).all())
    zero_diag = bool((np.diag(d) == 0).all()) and bool((d[~np.eye(n, dtype=bool)] > 0).all())
    # exhaustive triangle check: d(a,b) <= d(a,c) + d(c,b) for all triples
    triangle = True
    for k in range(n):
        if not np.all(d <= d[:, [k]] + d[[k], :]):
            triangle = False
            break
    examples_ok = (
        tx.path_distance(tree, "steel", "iron") == 2
        and tx.path_distance(tree, "steel", "copper") == 4
    )
    ok = sym and nonneg and zero_diag and triangle and examples_ok
    report(
        "taxonomy-metric",
        ok,
        f"metric axioms exhaustive on {n} nodes (sym {sym}, identity {zero_diag}, "
        f"triangle {triangle}); steel-iron=2, steel-copper=4: {examples_ok}",
    )


def test_mechanical_tags():
    props = tx.default_properties()
    brick = tx.mechanical_summary("brick", props)
    bread = tx.mechanical_summary("bread", props)
    timber = tx.mechanical_summary("timber", props)
    ok = (
        brick == ("Strong", "Rigid", "Heavy")
        and bread[0] == "Fragile"
        and timber[2] == "Light"
    )
    report(
        "mechanical-tags",
        ok,
        f"brick {brick}, bread[strength] {bread[0]}, timber[weight] {timber[2]}",
    )
