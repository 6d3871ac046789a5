"""Operator CLI: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
With --json-errors, failures print machine-readable JSON on stderr.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import dataio as dio
from . import evaluation as ev
from . import hiergat as hg
from . import probe as pb
from . import taxonomy as tx
from .renderer import RenderError, RenderSample, load_recipe, render_novel_view

click.UsageError.exit_code = 1

_DATA_ERRORS = (
    dio.DataError,
    tx.TaxonomyError,
    ev.EvalError,
    pb.ProbeError,
    RenderError,
    hg.ModelError,
    FileNotFoundError,
)
_NUMERIC_ERRORS = (hg.NumericsAbort, FloatingPointError)


def _run(ctx, fn):
    try:
        fn()
    except _NUMERIC_ERRORS as exc:
        _fail(ctx, exc, 3)
    except _DATA_ERRORS as exc:
        _fail(ctx, exc, 2)


def _fail(ctx, exc, code):
    if ctx.obj and ctx.obj.get("json_errors"):
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
    else:
        print(f"error: {exc}", file=sys.stderr)
    sys.exit(code)


def _load_taxonomy(path):
    return tx.load_taxonomy_file(path) if path else tx.default_taxonomy()


@click.group()
@click.option("--json-errors", is_flag=True, help="machine-readable errors on stderr")
@click.pass_context
def main(ctx, json_errors):
    """Hierarchical material recognition toolkit."""
    ctx.obj = {"json_errors": json_errors}


# ---------------------------------------------------------------------------
# taxonomy


@main.group()
def taxonomy():
    """Inspect, validate, and consolidate taxonomies."""


@taxonomy.command("validate")
@click.option("--file", "path", type=click.Path(), default=None, help="taxonomy JSON (default: shipped)")
@click.pass_context
def taxonomy_validate(ctx, path):
    def go():
        t = _load_taxonomy(path)
        materials = t.material_leaves()
        click.echo(f"valid taxonomy: {len(t.preorder)} nodes, {len(materials)} material leaves")

    _run(ctx, go)


@taxonomy.command("show")
@click.option("--file", "path", type=click.Path(), default=None)
@click.pass_context
def taxonomy_show(ctx, path):
    def go():
        t = _load_taxonomy(path)
        for nid in t.preorder:
            node = t.nodes[nid]
            click.echo("  " * t.level_index(nid) + f"{node.name} [{nid}] ({node.level})")

    _run(ctx, go)


@taxonomy.command("consolidate")
@click.option("--file", "path", type=click.Path(), default=None)
@click.option("--map", "map_path", type=click.Path(), default=None, help="consolidation JSON (default: shipped Matador-C1)")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def taxonomy_consolidate(ctx, path, map_path, out):
    def go():
        t = _load_taxonomy(path)
        cmap = tx.load_consolidation(map_path) if map_path else tx.default_consolidation()
        merged = tx.consolidate(t, cmap)
        with open(out, "w", encoding="utf-8") as f:
            json.dump(merged.to_document(), f, indent=2)
        click.echo(f"consolidated: {len(merged.material_leaves())} material leaves -> {out}")

    _run(ctx, go)


# ---------------------------------------------------------------------------
# dataset


@main.group()
def dataset():
    """Synthetic generation and external dataset conversion."""


@dataset.command("synth")
@click.option("--spec", "spec_path", type=click.Path(), default=None, help="synth.json overrides")
@click.option("--taxonomy", "tax_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0)
@click.pass_context
def dataset_synth(ctx, spec_path, tax_path, out, seed):
    def go():
        if tax_path:
            tree = tx.load_taxonomy_file(tax_path)
        else:
            from .experiments import small_taxonomy

            tree = small_taxonomy()
        if spec_path:
            spec = dio.load_synth_spec(spec_path, tree)
        else:
            spec = dio.SyntheticSpec(taxonomy=tree, seed=seed)
        manifest = dio.generate_synthetic(spec, out)
        click.echo(f"wrote {manifest}")

    _run(ctx, go)


@dataset.command("convert")
@click.option("--src", type=click.Path(), required=True, help="folder-per-class image tree")
@click.option("--mapping", type=click.Path(), required=True, help="JSON folder->leaf id map")
@click.option("--taxonomy", "tax_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def dataset_convert(ctx, src, mapping, tax_path, out):
    def go():
        tree = _load_taxonomy(tax_path)
        with open(mapping, "r", encoding="utf-8") as f:
            label_map = json.load(f)
        manifest = dio.convert_folder_tree(src, out, label_map, tree)
        click.echo(f"wrote {manifest}")

    _run(ctx, go)


# ---------------------------------------------------------------------------
# render


@main.command("render")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--recipe", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--sample", "sample_ids", multiple=True, help="limit to these sample ids")
@click.pass_context
def render_cmd(ctx, manifest_path, recipe, out, sample_ids):
    """Render the recipe's novel views for every (or selected) samples."""

    def go():
        manifest = dio.load_manifest(manifest_path)
        views = load_recipe(recipe)
        out_dir = Path(out)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        records = manifest.records
        if sample_ids:
            wanted = set(sample_ids)
            records = [r for r in records if r.id in wanted]
        new_records = []
        for rec in records:
            if not rec.depth:
                raise dio.DataError(f"record {rec.id!r} has no depth raster")
            appearance = dio.read_image(manifest.path(rec.appearance))
            depth = dio.read_depth_raster(manifest.path(rec.depth))
            sample = RenderSample.with_fov(appearance, depth, 74.0)
            for v, params in enumerate(views):
                view = render_novel_view(sample, **params)
                vid = f"{rec.id}_nv{v}"
                dio.write_image(out_dir / "images" / f"{vid}.png", view.image)
                with open(out_dir / "images" / f"{vid}.json", "w", encoding="utf-8") as f:
                    json.dump(view.metadata, f, indent=1, sort_keys=True)
                new_records.append(
                    dio.SampleRecord(
                        id=vid, appearance=f"images/{vid}.png", label=rec.label,
                        meta={"source": rec.id, "miss_fraction": view.miss_fraction},
                    )
                )
        rendered = dio.DatasetManifest(
            root=out_dir,
            taxonomy_hash=manifest.taxonomy_hash,
            records=new_records,
            splits={"ood": [r.id for r in new_records]},
        )
        dio.save_manifest(rendered, out_dir / "manifest.json")
        click.echo(f"rendered {len(new_records)} views -> {out_dir / 'manifest.json'}")

    _run(ctx, go)


# ---------------------------------------------------------------------------
# features


@main.group()
def features():
    """Feature cache management."""


@features.command("build")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--encoder", default="trivial", help="trivial | file:<cache.bin>")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def features_build(ctx, manifest_path, encoder, out):
    def go():
        manifest = dio.load_manifest(manifest_path)
        if encoder.startswith("file:"):
            cache = dio.load_feature_cache(encoder[5:])
            missing = {r.id for r in manifest.records} - set(cache.ids)
            if missing:
                raise dio.DataError(f"cache missing features for: {sorted(missing)[:5]}...")
        else:
            cache = dio.build_feature_cache(manifest, dio.get_encoder(encoder))
        dio.save_feature_cache(cache, out)
        click.echo(f"cached {len(cache.ids)} feature vectors (dim {cache.dim}) -> {out}")

    _run(ctx, go)


# ---------------------------------------------------------------------------
# train / eval / fewshot


def _training_config(path, seed):
    doc = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    model_doc = doc.pop("model", {})
    if seed is not None:
        doc["seed"] = seed
    return hg.TrainingConfig(**doc), hg.GatConfig(**model_doc)


@main.command("train")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--features", "features_path", type=click.Path(), required=True)
@click.option("--taxonomy", "tax_path", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help='JSON: TrainingConfig fields plus {"model": GatConfig fields}')
@click.option("--split", default="train")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def train_cmd(ctx, manifest_path, features_path, tax_path, config_path, split, seed, out):
    def go():
        tree = _load_taxonomy(tax_path)
        manifest = dio.load_manifest(manifest_path, tree)
        cache = dio.load_feature_cache(features_path)
        cfg, model_cfg = _training_config(config_path, seed)
        cache.require_dim(model_cfg.input_dim)
        ids = manifest.splits.get(split) or [r.id for r in manifest.records]
        feats = np.stack([cache.vector(i) for i in ids])
        labels = [manifest.record(i).label for i in ids]
        model = hg.HierGatModel.create(tree, model_cfg, cache.encoder, seed=cfg.seed)
        groups = hg.group_features_by_node(feats, labels, tree)
        hg.apply_prototypes(model, hg.init_prototypes(groups, strict=False))
        curve = hg.fit(model, hg.LabeledFeatures(feats, labels, tree), cfg)
        hg.save_checkpoint(model, out)
        final = curve[-1] if curve else float("nan")
        click.echo(f"trained {cfg.epochs} epochs, final loss {final:.4f} -> {out}")

    _run(ctx, go)


@main.command("eval")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--features", "features_path", type=click.Path(), default=None)
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--taxonomy", "tax_path", type=click.Path(), default=None)
@click.option("--split", type=click.Choice(["train", "val", "test", "ood"]), default="test")
@click.option("--grayscale", is_flag=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@click.pass_context
def eval_cmd(ctx, manifest_path, features_path, model_path, tax_path, split, grayscale, out, csv_path):
    def go():
        tree = _load_taxonomy(tax_path)
        manifest = dio.load_manifest(manifest_path, tree)
        model = hg.load_checkpoint(model_path, tree)
        encoder = dio.get_encoder(model.encoder_name)
        cache = dio.load_feature_cache(features_path) if features_path else None
        report = ev.run_eval(
            model, manifest, split, tree, encoder, cache, use_grayscale=grayscale
        )
        report.save(out)
        if csv_path:
            records = manifest.split_records(split)
            feats, leaf_ids = ev._features_for_split(manifest, split, encoder, cache, grayscale)
            preds = [hg.predict_flat(model, f) for f in feats]
            ev.save_predictions_csv(csv_path, [r.id for r in records], preds, leaf_ids)
        click.echo(
            f"split {split}: flat top-1 {report.flat_top1:.3f}, "
            f"per-level {['%.3f' % a for a in report.per_level_top1]} -> {out}"
        )

    _run(ctx, go)


@main.command("fewshot")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--features", "features_path", type=click.Path(), required=True)
@click.option("--taxonomy", "tax_path", type=click.Path(), default=None)
@click.option("--class", "held_out", required=True, help="held-out material id")
@click.option("--counts", default="1,2,4,8,16")
@click.option("--epochs", type=int, default=40, help="pretraining epochs")
@click.option("--finetune-epochs", type=int, default=12)
@click.option("--learning-rate", type=float, default=1e-2)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def fewshot_cmd(ctx, manifest_path, features_path, tax_path, held_out, counts,
                epochs, finetune_epochs, learning_rate, seed, out):
    def go():
        tree = _load_taxonomy(tax_path)
        manifest = dio.load_manifest(manifest_path, tree)
        cache = dio.load_feature_cache(features_path)
        train_ids = manifest.splits["train"]
        test_ids = manifest.splits["test"]
        feats = np.stack([cache.vector(i) for i in train_ids])
        labels = [manifest.record(i).label for i in train_ids]
        tfeats = np.stack([cache.vector(i) for i in test_ids])
        tlabels = [manifest.record(i).label for i in test_ids]
        from .experiments import EXPERIMENT_GAT

        rows = ev.few_shot_run(
            feats, labels, tfeats, tlabels, tree,
            ev.FewShotConfig(
                held_out_class=held_out,
                reintroduced_counts=tuple(int(c) for c in counts.split(",")),
                seed=seed,
                finetune_epochs=finetune_epochs,
            ),
            hg.TrainingConfig(batch_size=120, epochs=epochs, learning_rate=learning_rate, seed=seed),
            EXPERIMENT_GAT,
        )
        ev.save_fewshot_csv(out, rows)
        for r in rows:
            click.echo(f"n={r['n']}: accuracy {r['accuracy']:.3f}, hops {r['path_distance']:.2f}")

    _run(ctx, go)


# ---------------------------------------------------------------------------
# probe / serve


@main.command("probe")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--taxonomy", "tax_path", type=click.Path(), default=None)
@click.option("--image", "image_path", type=click.Path(), required=True)
@click.option("--x", type=int, required=True)
@click.option("--y", type=int, required=True)
@click.option("--threshold", type=float, default=0.7)
@click.option("--seed", type=int, default=0)
@click.option("--annotate-out", type=click.Path(), default=None,
              help="write the image with the window and label burned in")
@click.pass_context
def probe_cmd(ctx, model_path, tax_path, image_path, x, y, threshold, seed, annotate_out):
    def go():
        tree = _load_taxonomy(tax_path)
        model = hg.load_checkpoint(model_path, tree)
        img = dio.read_image(image_path)
        result = pb.probe(
            img, (x, y), model, tree,
            cfg=pb.McConfig(seed=seed),
            properties=tx.default_properties(),
            threshold=threshold,
        )
        body = result.to_json(tree)
        click.echo(json.dumps(body, indent=1))
        if annotate_out:
            _write_annotated(img, result, tree, annotate_out)

    _run(ctx, go)


def _write_annotated(img, result, tree, out_path):
    import cv2

    vis = (dio.linear_to_srgb(img) * 255).astype(np.uint8)[:, :, ::-1].copy()
    wx, wy, size = result.window
    h, w = vis.shape[:2]
    x0, y0 = max(0, wx), max(0, wy)
    x1, y1 = min(w - 1, wx + size), min(h - 1, wy + size)
    cv2.rectangle(vis, (x0, y0), (x1, y1), (0, 255, 255), 2)
    pred = result.prediction
    label = tree.nodes[pred.path[-1]].name
    if pred.tags:
        label += " (" + ", ".join(pred.tags) + ")"
    cv2.putText(vis, label, (x0 + 4, max(16, y0 - 6)),
                cv2.FONT_HERSHEY_SIMPLEX, 0.5, (0, 255, 255), 1, cv2.LINE_AA)
    cv2.imwrite(str(out_path), vis)


@main.command("serve")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.pass_context
def serve_cmd(ctx, config_path):
    """Start the HTTP probing service."""

    def go():
        from .service import ServiceConfig, serve

        serve(ServiceConfig.load(config_path))

    _run(ctx, go)


if __name__ == "__main__":
    main()
