import json
from pathlib import Path

from fastapi.testclient import TestClient
import numpy as np
import pytest
from click.testing import CliRunner

from matprobe import dataio as dio
from matprobe import hiergat as hg
from matprobe import taxonomy as tx
from matprobe.cli import main
from matprobe.experiments import small_taxonomy
from matprobe.service import ServiceConfig, ServiceState, create_app


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset + trained checkpoint + feature cache on disk."""
    root = tmp_path_factory.mktemp("ws")
    tree = small_taxonomy(branches=2, leaves_per_branch=2)
    tax_path = root / "taxonomy.json"
    tax_path.write_text(json.dumps(tree.to_document()))
    spec = dio.SyntheticSpec(taxonomy=tree, image_size=128, per_leaf=12, seed=1)
    manifest_path = dio.generate_synthetic(spec, root / "data")
    manifest = dio.load_manifest(manifest_path, tree)
    encoder = dio.get_encoder("trivial")
    cache = dio.build_feature_cache(manifest, encoder)
    cache_path = root / "features.bin"
    dio.save_feature_cache(cache, cache_path)

    ids = manifest.splits["train"]
    feats = np.stack([cache.vector(i) for i in ids])
    labels = [manifest.record(i).label for i in ids]
    model = hg.HierGatModel.create(
        tree, hg.GatConfig(input_dim=1024, hidden_dim=32, output_dim=16), seed=0
    )
    groups = hg.group_features_by_node(feats, labels, tree)
    hg.apply_prototypes(model, hg.init_prototypes(groups))
    hg.fit(
        model,
        hg.LabeledFeatures(feats, labels, tree),
        hg.TrainingConfig(batch_size=40, epochs=40, learning_rate=1e-2, seed=0),
    )
    ckpt = root / "model.ckpt"
    hg.save_checkpoint(model, ckpt)
    return {
        "root": root,
        "tree": tree,
        "tax_path": tax_path,
        "manifest_path": manifest_path,
        "manifest": manifest,
        "cache_path": cache_path,
        "ckpt": ckpt,
    }


@pytest.fixture(scope="module")
def client(workspace):
    config = ServiceConfig(
        checkpoint_path=str(workspace["ckpt"]),
        taxonomy_path=str(workspace["tax_path"]),
        manifest_path=str(workspace["manifest_path"]),
        mc_samples=4,
        base_seed=5,
    )
    app = create_app(ServiceState.load(config))
    return TestClient(app, raise_server_exceptions=False)


# ---------------------------------------------------------------------------
# HTTP endpoints


def test_healthz(client, workspace):
    r = client.get("/healthz")
    assert r.status_code == 200
    body = r.json()
    assert body["taxonomy_hash"] == workspace["tree"].content_hash()
    assert len(body["model_hash"]) == 64


def test_taxonomy_endpoint(client, workspace):
    r = client.get("/taxonomy")
    assert r.status_code == 200
    assert r.json() == workspace["tree"].to_document()


def test_taxonomy_endpoint_consolidated_default():
    # the shipped taxonomy consolidates to 37 leaves; serve that document
    tree = tx.consolidate(tx.default_taxonomy(), tx.default_consolidation())
    doc = tree.to_document()
    assert sum(1 for n in doc["nodes"] if n["level"] == "material") == 37


def test_properties_endpoint_brick():
    config_tree = tx.default_taxonomy()
    # properties endpoint needs the full taxonomy; build an app around it
    model = hg.HierGatModel.create(
        config_tree, hg.GatConfig(input_dim=1024, hidden_dim=8, output_dim=8), seed=0
    )
    import tempfile

    with tempfile.TemporaryDirectory() as td:
        ckpt = Path(td) / "m.ckpt"
        hg.save_checkpoint(model, ckpt)
        config = ServiceConfig(checkpoint_path=str(ckpt))
        app = create_app(ServiceState.load(config))
        with TestClient(app, raise_server_exceptions=False) as c:
            r = c.get("/properties/brick")
            assert r.status_code == 200
            assert r.json()["tags"] == ["Strong", "Rigid", "Heavy"]
            assert c.get("/properties/unobtanium").status_code == 404
            assert c.get("/properties/ceramic").status_code == 404


def test_probe_endpoint_deterministic(client, workspace):
    sid = workspace["manifest"].records[0].id
    form = {"x": 64, "y": 64, "sample_id": sid, "seed": 11}
    a = client.post("/probe", data=form)
    b = client.post("/probe", data=form)
    assert a.status_code == 200
    assert a.json() == b.json()
    body = a.json()
    assert set(body) >= {"path", "finest_level", "window", "tags", "entropy_per_level"}


def test_probe_endpoint_server_seed_stable(client, workspace):
    sid = workspace["manifest"].records[0].id
    form = {"x": 40, "y": 50, "sample_id": sid}
    a = client.post("/probe", data=form)
    b = client.post("/probe", data=form)
    assert a.json() == b.json()  # derived seed is a function of the request


def test_probe_endpoint_upload(client):
    import cv2

    img = (np.random.default_rng(0).random((96, 96, 3)) * 255).astype(np.uint8)
    ok, blob = cv2.imencode(".png", img)
    assert ok
    r = client.post(
        "/probe",
        data={"x": 48, "y": 48, "seed": 3},
        files={"image": ("probe.png", blob.tobytes(), "image/png")},
    )
    assert r.status_code == 200


def test_probe_endpoint_errors(client, workspace):
    sid = workspace["manifest"].records[0].id
    # no image and no sample id
    assert client.post("/probe", data={"x": 1, "y": 1}).status_code == 400
    # unknown sample
    assert (
        client.post("/probe", data={"x": 1, "y": 1, "sample_id": "ghost"}).status_code
        == 404
    )
    # out-of-bounds coordinate
    assert (
        client.post("/probe", data={"x": 9999, "y": 1, "sample_id": sid}).status_code
        == 422
    )


def test_probe_endpoint_upload_cap(workspace):
    config = ServiceConfig(
        checkpoint_path=str(workspace["ckpt"]),
        taxonomy_path=str(workspace["tax_path"]),
        max_upload_bytes=1000,
    )
    app = create_app(ServiceState.load(config))
    with TestClient(app, raise_server_exceptions=False) as c:
        r = c.post(
            "/probe",
            data={"x": 1, "y": 1},
            files={"image": ("big.png", b"\x89PNG" + b"0" * 5000, "image/png")},
        )
        assert r.status_code == 413


def test_spec_matches_routes(client):
    spec = client.get("/spec").json()
    declared = {(r["method"], r["path"]) for r in spec["routes"]}
    assert ("POST", "/probe") in declared
    assert ("GET", "/taxonomy") in declared
    # contract: every declared route answers something other than 404-unknown-route
    for method, path in declared:
        probe_path = path.replace("{node_id}", "brick")
        r = client.request(method, probe_path)
        assert r.status_code != 405
        if method == "GET" and "{" not in path:
            assert r.status_code in (200, 404)


# ---------------------------------------------------------------------------
# CLI


def test_cli_taxonomy_validate_default():
    runner = CliRunner()
    res = runner.invoke(main, ["taxonomy", "validate"])
    assert res.exit_code == 0
    assert "57 material leaves" in res.output


def test_cli_taxonomy_consolidate(tmp_path):
    runner = CliRunner()
    out = tmp_path / "c1.json"
    res = runner.invoke(main, ["taxonomy", "consolidate", "--out", str(out)])
    assert res.exit_code == 0
    assert "37 material leaves" in res.output
    merged = tx.load_taxonomy_file(out)
    assert len(merged.material_leaves()) == 37


def test_cli_usage_error_exit_code():
    runner = CliRunner()
    res = runner.invoke(main, ["train"])  # missing required options
    assert res.exit_code == 1


def test_cli_data_error_exit_code(tmp_path):
    runner = CliRunner()
    res = runner.invoke(
        main, ["taxonomy", "validate", "--file", str(tmp_path / "missing.json")]
    )
    assert res.exit_code == 2


def test_cli_json_errors(tmp_path):
    runner = CliRunner()
    res = runner.invoke(
        main,
        ["--json-errors", "taxonomy", "validate", "--file", str(tmp_path / "nope.json")],
    )
    assert res.exit_code == 2


def test_cli_train_eval_probe_pipeline(workspace, tmp_path):
    runner = CliRunner()
    ckpt = tmp_path / "cli_model.ckpt"
    cfg = tmp_path / "train.json"
    cfg.write_text(
        json.dumps(
            {
                "batch_size": 40,
                "epochs": 40,
                "learning_rate": 1e-2,
                "model": {"input_dim": 1024, "hidden_dim": 32, "output_dim": 16},
            }
        )
    )
    res = runner.invoke(
        main,
        [
            "train",
            "--manifest", str(workspace["manifest_path"]),
            "--features", str(workspace["cache_path"]),
            "--taxonomy", str(workspace["tax_path"]),
            "--config", str(cfg),
            "--seed", "0",
            "--out", str(ckpt),
        ],
    )
    assert res.exit_code == 0, res.output

    report = tmp_path / "report.json"
    res = runner.invoke(
        main,
        [
            "eval",
            "--manifest", str(workspace["manifest_path"]),
            "--features", str(workspace["cache_path"]),
            "--model", str(ckpt),
            "--taxonomy", str(workspace["tax_path"]),
            "--split", "train",
            "--out", str(report),
        ],
    )
    assert res.exit_code == 0, res.output
    body = json.loads(report.read_text())
    assert body["flat_top1"] >= 0.95

    rec = workspace["manifest"].records[0]
    annotated = tmp_path / "annotated.png"
    res = runner.invoke(
        main,
        [
            "probe",
            "--model", str(ckpt),
            "--taxonomy", str(workspace["tax_path"]),
            "--image", str(workspace["manifest"].path(rec.appearance)),
            "--x", "64", "--y", "64",
            "--seed", "0",
            "--annotate-out", str(annotated),
        ],
    )
    assert res.exit_code == 0, res.output
    parsed = json.loads(res.output[res.output.index("{"):])
    assert parsed["path"][0]["id"] == "root"
    assert annotated.exists()


def test_cli_probe_out_of_bounds(workspace, tmp_path):
    runner = CliRunner()
    rec = workspace["manifest"].records[0]
    res = runner.invoke(
        main,
        [
            "probe",
            "--model", str(workspace["ckpt"]),
            "--taxonomy", str(workspace["tax_path"]),
            "--image", str(workspace["manifest"].path(rec.appearance)),
            "--x", "5000", "--y", "0",
        ],
    )
    assert res.exit_code == 2


def test_cli_render_recipe(workspace, tmp_path):
    runner = CliRunner()
    recipe = tmp_path / "recipe.json"
    recipe.write_text(
        json.dumps(
            {
                "views": [
                    {
                        "transform": {"rz_deg": 15.0, "translation": [0, 0, 0.05]},
                        "lens": {"focus_distance": 0.35},
                        "sensor": {"read_noise": 0.01},
                        "seed": 3,
                        "spp": 1,
                        "render_size": 128,
                        "target_size": 128,
                    }
                ]
            }
        )
    )
    out_dir = tmp_path / "renders"
    sid = workspace["manifest"].records[0].id
    res = runner.invoke(
        main,
        [
            "render",
            "--manifest", str(workspace["manifest_path"]),
            "--recipe", str(recipe),
            "--out", str(out_dir),
            "--sample", sid,
        ],
    )
    assert res.exit_code == 0, res.output
    rendered = dio.load_manifest(out_dir / "manifest.json")
    assert len(rendered.records) == 1
    assert (out_dir / rendered.records[0].appearance).exists()


def test_cli_features_build_and_synth(tmp_path):
    runner = CliRunner()
    out_dir = tmp_path / "synth"
    res = runner.invoke(main, ["dataset", "synth", "--out", str(out_dir), "--seed", "3"])
    assert res.exit_code == 0, res.output
    cache_path = tmp_path / "f.bin"
    res = runner.invoke(
        main,
        ["features", "build", "--manifest", str(out_dir / "manifest.json"),
         "--out", str(cache_path)],
    )
    assert res.exit_code == 0, res.output
    cache = dio.load_feature_cache(cache_path)
    assert cache.dim == 1024
