"""Desk-scale experiments: end-to-end synthetic learning, the novel-view
generalization study, and the few-shot curve. Shared by the acceptance suite
and the runnable scripts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio as dio
from . import evaluation as ev
from . import hiergat as hg
from .renderer import RenderSample, SensorModel, SpatialTransform, ThinLens, render_novel_view
from .taxonomy import Taxonomy, load_taxonomy

EXPERIMENT_GAT = hg.GatConfig(input_dim=1024, hidden_dim=64, output_dim=32, layers=2)


def small_taxonomy(branches: int = 3, leaves_per_branch: int = 3) -> Taxonomy:
    """Uniform 3-level taxonomy (phase/form/material) for synthetic runs."""
    nodes = [{"id": "root", "name": "Synthetic root", "level": "phase", "parent": None}]
    for b in range(branches):
        fid = f"group{b}"
        nodes.append({"id": fid, "name": f"Group {b}", "level": "form", "parent": "root"})
        for l in range(leaves_per_branch):
            nodes.append(
                {
                    "id": f"{fid}_leaf{l}",
                    "name": f"Family {b}.{l}",
                    "level": "material",
                    "parent": fid,
                }
            )
    return load_taxonomy({"level_names": ["phase", "form", "material"], "nodes": nodes})


def _features_for_ids(manifest, cache, ids):
    feats = np.stack([cache.vector(i) for i in ids])
    labels = [manifest.record(i).label for i in ids]
    return feats, labels


def _train_model(tree, feats, labels, seed, epochs=50, lr=1e-2, batch=120):
    model = hg.HierGatModel.create(tree, EXPERIMENT_GAT, "trivial", seed=seed)
    groups = hg.group_features_by_node(feats, labels, tree)
    hg.apply_prototypes(model, hg.init_prototypes(groups, strict=False))
    curve = hg.fit(
        model,
        hg.LabeledFeatures(feats, labels, tree),
        hg.TrainingConfig(batch_size=batch, epochs=epochs, learning_rate=lr, seed=seed),
    )
    return model, curve


def end_to_end_learning(work_dir, seed: int = 0, per_leaf: int = 40, epochs: int = 50) -> dict:
    """Train on the 9-leaf synthetic set, evaluate the held-out test split."""
    tree = small_taxonomy()
    spec = dio.SyntheticSpec(taxonomy=tree, image_size=128, per_leaf=per_leaf, seed=seed)
    manifest = dio.load_manifest(dio.generate_synthetic(spec, Path(work_dir) / "data"), tree)
    encoder = dio.get_encoder("trivial")
    cache = dio.build_feature_cache(manifest, encoder)
    feats, labels = _features_for_ids(manifest, cache, manifest.splits["train"])
    model, curve = _train_model(tree, feats, labels, seed, epochs=epochs)
    report = ev.run_eval(model, manifest, "test", tree, encoder, cache)
    return {
        "loss_curve": curve,
        "test_flat_top1": report.flat_top1,
        "per_level_top1": report.per_level_top1,
        "level_names": list(report.level_names),
        "sample_count": report.sample_count,
        "model": model,
        "manifest": manifest,
        "cache": cache,
        "taxonomy": tree,
    }


_TRAIN_POSES = [
    dict(rz_deg=22.0, rx_deg=6.0, scale=1.0, dolly=0.02),
    dict(rz_deg=-31.0, rx_deg=-4.0, scale=1.0, dolly=-0.03),
    dict(rz_deg=40.0, ry_deg=5.0, scale=1.0, dolly=0.06),
    dict(rz_deg=-14.0, ry_deg=-7.0, scale=1.0, dolly=-0.015),
]

_TEST_POSES = [
    dict(rz_deg=28.0, rx_deg=-5.0, scale=1.0, dolly=0.04),
    dict(rz_deg=-37.0, ry_deg=6.0, scale=1.0, dolly=-0.02),
]


def _render_views(manifest, ids, poses, out_dir, seed0, noise=0.01):
    """Render pose variations for each sample; returns (records, image dir)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for k, sid in enumerate(ids):
        rec = manifest.record(sid)
        appearance = dio.read_image(manifest.path(rec.appearance))
        depth = dio.read_depth_raster(manifest.path(rec.depth))
        sample = RenderSample.with_fov(appearance, depth, 74.0)
        d0 = float(np.median(depth))
        for p, pose in enumerate(poses):
            tr = SpatialTransform.from_euler(
                rx_deg=pose.get("rx_deg", 0.0),
                ry_deg=pose.get("ry_deg", 0.0),
                rz_deg=pose.get("rz_deg", 0.0),
                translation=(0.0, 0.0, pose.get("dolly", 0.0)),
                scale=pose.get("scale", 1.0),
            )
            view = render_novel_view(
                sample,
                tr,
                ThinLens(focus_distance=d0 + pose.get("dolly", 0.0)),
                SensorModel(read_noise=noise),
                seed=seed0 + 131 * k + p,
                render_size=appearance.shape[0],
                target_size=appearance.shape[0],
                spp=1,
                background=0.5,
            )
            vid = f"{sid}_view{p}"
            dio.write_image(out / "images" / f"{vid}.png", view.image)
            records.append((vid, f"images/{vid}.png", rec.label))
    return records


def novel_view_study(work_dir, seed: int = 0, per_leaf: int = 24, epochs: int = 40) -> dict:
    """Train with and without rendered pose variations; evaluate both on a
    held-out rendered-pose split."""
    work = Path(work_dir)
    tree = small_taxonomy()
    spec = dio.SyntheticSpec(
        taxonomy=tree, image_size=128, per_leaf=per_leaf, seed=seed,
        splits=(0.75, 0.08),
    )
    manifest = dio.load_manifest(dio.generate_synthetic(spec, work / "data"), tree)
    encoder = dio.get_encoder("trivial")

    train_ids = manifest.splits["train"]
    test_ids = manifest.splits["test"]
    train_renders = _render_views(manifest, train_ids, _TRAIN_POSES, work / "renders_train", seed)
    test_renders = _render_views(manifest, test_ids, _TEST_POSES, work / "renders_test", seed + 7001)

    cache = dio.build_feature_cache(manifest, encoder)
    base_feats, base_labels = _features_for_ids(manifest, cache, train_ids)

    def encode_renders(records, root):
        from .renderer.filters import resample_image

        feats, labels = [], []
        for _vid, rel, label in records:
            img = dio.read_image(Path(root) / rel)
            size = encoder.input_size
            if img.shape[0] != size:
                img = resample_image(img, (size, size))
            feats.append(encoder.encode(img))
            labels.append(label)
        return np.asarray(feats), labels

    render_feats, render_labels = encode_renders(train_renders, work / "renders_train")
    test_feats, test_labels = encode_renders(test_renders, work / "renders_test")

    model_plain, _ = _train_model(tree, base_feats, base_labels, seed, epochs=epochs)
    aug_feats = np.concatenate([base_feats, render_feats])
    aug_labels = base_labels + render_labels
    model_aug, _ = _train_model(tree, aug_feats, aug_labels, seed, epochs=epochs)

    def accuracy(model):
        preds = [hg.predict_flat(model, f) for f in test_feats]
        return float(np.mean([p == l for p, l in zip(preds, test_labels)]))

    acc_plain = accuracy(model_plain)
    acc_aug = accuracy(model_aug)
    return {
        "accuracy_without_views": acc_plain,
        "accuracy_with_views": acc_aug,
        "gain_points": 100.0 * (acc_aug - acc_plain),
        "rendered_test_samples": len(test_labels),
    }


def few_shot_study(
    work_dir,
    seed: int = 0,
    counts: tuple[int, ...] = (1, 2, 4, 8, 16),
    held_out: str | None = None,
    compare_scratch: bool = False,
) -> dict:
    """Hold one leaf out, reintroduce n samples, report accuracy and hop curves."""
    tree = small_taxonomy()
    # 32 train / 50 test per leaf: accuracy resolves to 2-point steps
    spec = dio.SyntheticSpec(
        taxonomy=tree, image_size=128, per_leaf=90, seed=seed, splits=(32 / 90, 8 / 90)
    )
    manifest = dio.load_manifest(dio.generate_synthetic(spec, Path(work_dir) / "data"), tree)
    encoder = dio.get_encoder("trivial")
    cache = dio.build_feature_cache(manifest, encoder)
    train_feats, train_labels = _features_for_ids(manifest, cache, manifest.splits["train"])
    test_feats, test_labels = _features_for_ids(manifest, cache, manifest.splits["test"])
    held = held_out or tree.leaves()[4]

    pretrain_cfg = hg.TrainingConfig(
        batch_size=120, epochs=40, learning_rate=1e-2, seed=seed
    )
    rows = ev.few_shot_run(
        train_feats, train_labels, test_feats, test_labels, tree,
        ev.FewShotConfig(held_out_class=held, reintroduced_counts=tuple(counts),
                         seed=seed, finetune_epochs=12),
        pretrain_cfg,
        EXPERIMENT_GAT,
    )
    out = {"held_out": held, "curve": rows}
    if compare_scratch:
        model, _ = _train_model(tree, train_feats, train_labels, seed, epochs=40)
        idx = [i for i, l in enumerate(test_labels) if l == held]
        preds = [hg.predict_flat(model, test_feats[i]) for i in idx]
        out["scratch_accuracy"] = float(np.mean([p == held for p in preds]))
    return out
