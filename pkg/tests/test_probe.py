import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matprobe import dataio as dio
from matprobe import hiergat as hg
from matprobe import probe as pb
from matprobe import taxonomy as tx
from conftest import make_taxonomy


def random_distribution(taxonomy, rng, peaked=None):
    """A structurally valid PredictionDistribution with random level simplices."""
    graph = tx.to_graph(taxonomy)
    mean = np.empty(graph.num_nodes)
    for members in graph.level_members:
        if peaked is not None:
            p = np.full(len(members), 1e-6)
            ids = [graph.node_ids[m] for m in members]
            for d, nid in enumerate(peaked.path):
                if nid in ids:
                    p[ids.index(nid)] = 1.0
        else:
            p = rng.dirichlet(np.ones(len(members)))
        mean[list(members)] = p / p.sum()
    std = rng.random(graph.num_nodes) * 0.05
    entropy = np.zeros(len(graph.level_members))
    for d, members in enumerate(graph.level_members):
        p = np.maximum(mean[list(members)], 1e-12)
        p = p / p.sum()
        entropy[d] = -(p * np.log(p)).sum()
    return pb.PredictionDistribution(graph.node_ids, mean, std, entropy)


@pytest.fixture(scope="module")
def toy_setup():
    tree = make_taxonomy([3], level_names=["phase", "material"])
    model = hg.HierGatModel.create(
        tree, hg.GatConfig(input_dim=1024, hidden_dim=16, output_dim=8), seed=0
    )
    return tree, model


# ---------------------------------------------------------------------------
# mc_predict


def test_mc_predict_tiny_rate_matches_deterministic(toy_setup):
    tree, model = toy_setup
    enc = dio.get_encoder("trivial")
    img = np.random.default_rng(0).random((128, 128, 3))
    cfg = pb.McConfig(dropout_rate=1e-9, num_samples=4, seed=0)
    dist = pb.mc_predict(model, img, cfg, enc)
    assert np.all(dist.std < 1e-9)
    feats = enc.encode(img)
    logits = hg.forward(model, feats).data[0]
    dists = hg.level_distributions(logits, model.graph)
    for members, want in zip(model.graph.level_members, dists):
        assert np.allclose(dist.mean[list(members)], want, atol=1e-9)


def test_mc_predict_uniform_model_entropy(toy_setup):
    tree, model_ = toy_setup
    model = hg.HierGatModel.create(
        tree, hg.GatConfig(input_dim=1024, hidden_dim=16, output_dim=8), seed=0
    )
    model.readout.data[:] = 0.0  # uniform logits at every level
    enc = dio.get_encoder("trivial")
    img = np.random.default_rng(1).random((128, 128, 3))
    cfg = pb.McConfig(dropout_rate=1e-9, num_samples=2, seed=0)
    dist = pb.mc_predict(model, img, cfg, enc)
    for d, members in enumerate(model.graph.level_members):
        assert abs(dist.level_entropy[d] - np.log(len(members))) < 1e-6


def test_mc_predict_deterministic_under_seed(toy_setup):
    tree, model = toy_setup
    enc = dio.get_encoder("trivial")
    img = np.random.default_rng(2).random((96, 96, 3))
    cfg = pb.McConfig(dropout_rate=0.2, num_samples=8, seed=5)
    a = pb.mc_predict(model, img, cfg, enc)
    b = pb.mc_predict(model, img, cfg, enc)
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.std, b.std)
    c = pb.mc_predict(model, img, pb.McConfig(dropout_rate=0.2, num_samples=8, seed=6), enc)
    assert not np.array_equal(a.mean, c.mean)


def test_mc_entropy_bounds(toy_setup):
    tree, model = toy_setup
    enc = dio.get_encoder("trivial")
    img = np.random.default_rng(3).random((64, 64, 3))
    dist = pb.mc_predict(model, img, pb.McConfig(seed=1), enc)
    for d, members in enumerate(model.graph.level_members):
        assert -1e-12 <= dist.level_entropy[d] <= np.log(len(members)) + 1e-12
    # per-level means sum to one
    for members in model.graph.level_members:
        assert abs(dist.mean[list(members)].sum() - 1.0) < 1e-6


# ---------------------------------------------------------------------------
# best_window


def test_best_window_single_candidate(toy_setup):
    tree, model = toy_setup
    enc = dio.get_encoder("trivial")
    img = np.random.default_rng(4).random((64, 64, 3))
    rect, size, _ = pb.best_window(img, (32, 32), model, pb.McConfig(seed=0), enc)
    assert rect == (0, 0, 64, 64)
    assert size == 64


def test_best_window_corner_clipping(toy_setup):
    tree, model = toy_setup
    enc = dio.get_encoder("trivial")
    img = np.random.default_rng(5).random((200, 200, 3))
    rect, size, dist = pb.best_window(img, (0, 0), model, pb.McConfig(seed=0), enc)
    x0, y0, x1, y1 = rect
    assert x0 == 0 and y0 == 0
    assert x1 <= 200 and y1 <= 200
    assert np.all(np.isfinite(dist.mean))


def test_best_window_out_of_bounds(toy_setup):
    tree, model = toy_setup
    enc = dio.get_encoder("trivial")
    img = np.zeros((64, 64, 3))
    with pytest.raises(pb.ProbeError, match="outside"):
        pb.best_window(img, (64, 10), model, pb.McConfig(seed=0), enc)


# ---------------------------------------------------------------------------
# best_first_classify


def test_best_first_full_mass_path(toy_setup):
    tree, _ = toy_setup
    leaf = tree.leaves()[1]
    label = tx.label_of(tree, leaf)
    dist = random_distribution(tree, np.random.default_rng(0), peaked=label)
    dist.std[:] = 0.0
    pred = pb.best_first_classify(dist, tree, threshold=0.7)
    assert pred.path == label.path
    assert pred.finest_confident_level == tree.level_names[-1]
    assert all(c >= 0.7 for c in pred.confidences[1:])


def test_best_first_low_children_stops_at_root(toy_setup):
    tree, _ = toy_setup
    graph = tx.to_graph(tree)
    mean = np.zeros(graph.num_nodes)
    mean[0] = 1.0
    mean[1:] = 1.0 / (graph.num_nodes - 1)
    dist = pb.PredictionDistribution(
        graph.node_ids, mean, np.zeros(graph.num_nodes), np.zeros(len(graph.level_members))
    )
    pred = pb.best_first_classify(dist, tree, threshold=0.7)
    assert pred.path == (tree.root,)
    assert pred.finest_confident_level == tree.level_names[0]


def test_best_first_textile_scenario():
    """Leaf mass split between two siblings, confident parent: stop at parent."""
    tree = tx.default_taxonomy()
    graph = tx.to_graph(tree)
    mean = np.full(graph.num_nodes, 1e-4)
    for nid, p in [
        ("solid", 1.0),
        ("abiotic", 0.95),
        ("polymer", 0.92),
        ("textile", 0.90),
        ("wool", 0.45),
        ("carpet", 0.45),
    ]:
        mean[graph.index_of(nid)] = p
    dist = pb.PredictionDistribution(
        graph.node_ids, mean, np.zeros(graph.num_nodes), np.zeros(5)
    )
    pred = pb.best_first_classify(dist, tree, threshold=0.7)
    assert pred.path[-1] == "textile"
    assert pred.finest_confident_level == "form"


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_best_first_always_valid_chain(seed, threshold):
    tree = make_taxonomy([2, 3], level_names=["phase", "form", "material"])
    dist = random_distribution(tree, np.random.default_rng(seed))
    pred = pb.best_first_classify(dist, tree, threshold=threshold)
    assert pred.path[0] == tree.root
    for parent, child in zip(pred.path, pred.path[1:]):
        assert tree.nodes[child].parent == parent
    # monotone stopping: accepted non-root confidences meet the threshold
    for c in pred.confidences[1:]:
        assert c >= threshold


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5), st.floats(0.5, 1.0))
def test_best_first_threshold_monotonicity(seed, lo, hi):
    tree = make_taxonomy([3, 2], level_names=["phase", "form", "material"])
    dist = random_distribution(tree, np.random.default_rng(seed))
    p_lo = pb.best_first_classify(dist, tree, threshold=lo)
    p_hi = pb.best_first_classify(dist, tree, threshold=hi)
    assert len(p_hi.path) <= len(p_lo.path)


# ---------------------------------------------------------------------------
# annotate


def test_annotate_brick():
    props = tx.default_properties()
    pred = pb.HierarchicalPrediction(
        path=("solid", "abiotic", "ceramic", "structural", "brick"),
        confidences=(1.0, 0.9, 0.9, 0.9, 0.9),
        finest_confident_level="material",
    )
    out = pb.annotate(pred, props)
    assert out.tags == ("Strong", "Rigid", "Heavy")


def test_annotate_interior_node_no_tags():
    props = tx.default_properties()
    pred = pb.HierarchicalPrediction(
        path=("solid", "abiotic", "ceramic"),
        confidences=(1.0, 0.9, 0.8),
        finest_confident_level="composition",
    )
    assert pb.annotate(pred, props).tags == ()


def test_annotate_timber_light():
    props = tx.default_properties()
    pred = pb.HierarchicalPrediction(
        path=("solid", "biotic", "derivative", "wood", "timber"),
        confidences=(1.0,) * 5,
        finest_confident_level="material",
    )
    assert "Light" in pb.annotate(pred, props).tags


# ---------------------------------------------------------------------------
# end-to-end probe


def test_probe_deterministic_and_consistent(toy_setup):
    tree, model = toy_setup
    enc = dio.get_encoder("trivial")
    img = np.random.default_rng(6).random((128, 128, 3))
    kwargs = dict(cfg=pb.McConfig(seed=3), encoder=enc, threshold=0.5)
    a = pb.probe(img, (64, 64), model, tree, **kwargs)
    b = pb.probe(img, (64, 64), model, tree, **kwargs)
    assert a.to_json(tree) == b.to_json(tree)
    for parent, child in zip(a.prediction.path, a.prediction.path[1:]):
        assert tree.nodes[child].parent == parent


def test_probe_on_noise_still_valid_chain(toy_setup):
    tree, model = toy_setup
    img = np.random.default_rng(7).random((96, 96, 3))
    res = pb.probe(img, (48, 48), model, tree, cfg=pb.McConfig(seed=1))
    for parent, child in zip(res.prediction.path, res.prediction.path[1:]):
        assert tree.nodes[child].parent == parent
    js = res.to_json(tree)
    assert set(js) == {"path", "finest_level", "window", "tags", "entropy_per_level"}


# ---------------------------------------------------------------------------
# experiment-backed behavior on a trained model


@pytest.fixture(scope="module")
def trained_toy(tmp_path_factory):
    from matprobe.experiments import small_taxonomy, _features_for_ids, _train_model

    tree = small_taxonomy()
    spec = dio.SyntheticSpec(taxonomy=tree, image_size=128, per_leaf=12, seed=0)
    manifest = dio.load_manifest(
        dio.generate_synthetic(spec, tmp_path_factory.mktemp("probe_synth")), tree
    )
    enc = dio.get_encoder("trivial")
    cache = dio.build_feature_cache(manifest, enc)
    feats, labels = _features_for_ids(manifest, cache, manifest.splits["train"])
    model, _ = _train_model(tree, feats, labels, 0, epochs=45)
    return tree, model, manifest, enc, spec


def test_probe_training_image_recovers_leaf(trained_toy):
    tree, model, manifest, enc, _spec = trained_toy
    correct = 0
    ids = manifest.splits["train"][:6]
    for sid in ids:
        rec = manifest.record(sid)
        img = dio.read_image(manifest.path(rec.appearance))
        res = pb.probe(img, (64, 64), model, tree, cfg=pb.McConfig(seed=0),
                       encoder=enc, threshold=0.5)
        correct += res.prediction.path[-1] == rec.label
    assert correct >= 5


def test_best_window_avoids_texture_boundary(trained_toy):
    tree, model, manifest, enc, spec = trained_toy
    from matprobe.dataio import _family_params, synth_texture

    params = _family_params(spec)
    leaves = list(tree.leaves())
    rng = np.random.default_rng(1)

    def big(leaf):
        f = params[leaf]
        return synth_texture(512, f["theta"], f["freq"], f["contrast"], f["tint"], 0.02, rng)

    composite = np.concatenate([big(leaves[0])[:, :256], big(leaves[4])[:, 256:]], axis=1)
    probes = [(96, 128), (128, 256), (80, 384), (60, 64), (110, 200)]
    inside = 0
    for coord in probes:
        rect, _size, _dist = pb.best_window(composite, coord, model, pb.McConfig(seed=0), enc)
        inside += rect[2] <= 256  # window stays in the left texture
    assert inside >= 4
