#!/usr/bin/env python3
"""Train a small model on synthetic textures, build a two-texture scene, and
write probe results (JSON + annotated image) for a set of click points."""

import argparse
import json
from pathlib import Path

import numpy as np

from matprobe import dataio as dio
from matprobe import probe as pb
from matprobe.cli import _write_annotated
from matprobe.dataio import _family_params, synth_texture
from matprobe.experiments import _features_for_ids, _train_model, small_taxonomy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="probe_demo_out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    tree = small_taxonomy()
    spec = dio.SyntheticSpec(taxonomy=tree, image_size=128, per_leaf=16, seed=args.seed)
    manifest = dio.load_manifest(dio.generate_synthetic(spec, out / "data"), tree)
    encoder = dio.get_encoder("trivial")
    cache = dio.build_feature_cache(manifest, encoder)
    feats, labels = _features_for_ids(manifest, cache, manifest.splits["train"])
    model, _ = _train_model(tree, feats, labels, args.seed, epochs=45)

    params = _family_params(spec)
    leaves = list(tree.leaves())
    rng = np.random.default_rng(args.seed + 1)

    def big(leaf):
        f = params[leaf]
        return synth_texture(512, f["theta"], f["freq"], f["contrast"], f["tint"], 0.02, rng)

    scene = np.concatenate([big(leaves[0])[:, :256], big(leaves[4])[:, 256:]], axis=1)
    dio.write_image(out / "scene.png", scene)

    results = []
    for i, coord in enumerate([(96, 128), (384, 128), (128, 384), (400, 400)]):
        res = pb.probe(scene, coord, model, tree, cfg=pb.McConfig(seed=args.seed),
                       encoder=encoder, threshold=0.6)
        body = res.to_json(tree)
        body["coordinate"] = list(coord)
        results.append(body)
        _write_annotated(scene, res, tree, out / f"probe_{i}.png")

    with open(out / "probes.json", "w", encoding="utf-8") as f:
        json.dump(results, f, indent=1)
    print(f"wrote scene + {len(results)} annotated probes to {out}/")
    for body in results:
        path = " > ".join(p["name"] for p in body["path"])
        print(f"  ({body['coordinate'][0]},{body['coordinate'][1]}): {path}")


if __name__ == "__main__":
    main()
