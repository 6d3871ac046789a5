"""Scene-point probing: multi-scale window selection, Monte-Carlo-dropout
predictive distributions, entropy-guided best-first taxonomy descent, and
mechanical-property annotation of the accepted path."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import hiergat as hg
from .dataio import EncoderHandle
from .renderer.filters import resample_image
from .taxonomy import (
    MechanicalProperties,
    QualityThresholds,
    Taxonomy,
    TaxonomyError,
    mechanical_summary,
)

__all__ = [
    "ProbeError",
    "McConfig",
    "PredictionDistribution",
    "HierarchicalPrediction",
    "ProbeResult",
    "WINDOW_SIZES",
    "mc_predict",
    "best_window",
    "best_first_classify",
    "annotate",
    "probe",
]

WINDOW_SIZES = (64, 128, 256, 512, 1024)


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class McConfig:
    dropout_rate: float = 0.2
    num_samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.dropout_rate < 1.0):
            raise ProbeError("dropout rate must be in (0,1)")
        if self.num_samples < 2:
            raise ProbeError("need at least 2 Monte Carlo samples")


@dataclass
class PredictionDistribution:
    """Per-node statistics of within-level softmax probabilities plus the
    per-level predictive entropy (nats) of the mean distribution."""

    node_ids: tuple[str, ...]
    mean: np.ndarray  # (N,) in [0,1]
    std: np.ndarray  # (N,)
    level_entropy: np.ndarray  # (D,) nats

    def prob(self, node_id: str) -> float:
        return float(self.mean[self.node_ids.index(node_id)])


@dataclass
class HierarchicalPrediction:
    path: tuple[str, ...]
    confidences: tuple[float, ...]
    finest_confident_level: str
    tags: tuple[str, ...] = ()


@dataclass
class ProbeResult:
    prediction: HierarchicalPrediction
    window: tuple[int, int, int]  # nominal square: top-left x, y, size
    distribution: PredictionDistribution

    def to_json(self, taxonomy: Taxonomy) -> dict:
        return {
            "path": [
                {
                    "id": nid,
                    "name": taxonomy.nodes[nid].name,
                    "level": taxonomy.nodes[nid].level,
                    "confidence": conf,
                }
                for nid, conf in zip(self.prediction.path, self.prediction.confidences)
            ],
            "finest_level": self.prediction.finest_confident_level,
            "window": {
                "x": self.window[0],
                "y": self.window[1],
                "size": self.window[2],
            },
            "tags": list(self.prediction.tags),
            "entropy_per_level": [float(h) for h in self.distribution.level_entropy],
        }


def _encode_window(window: np.ndarray, encoder: EncoderHandle) -> np.ndarray:
    size = encoder.input_size
    if window.shape[0] != size or window.shape[1] != size:
        window = resample_image(window, (size, size))
    return encoder.encode(window)


def mc_predict(
    model: hg.HierGatModel,
    image_window: np.ndarray,
    cfg: McConfig,
    encoder: EncoderHandle,
) -> PredictionDistribution:
    """num_samples stochastic forward passes with dropout active; statistics
    of the per-level softmax probabilities."""
    feats = _encode_window(np.asarray(image_window, dtype=np.float64), encoder)
    graph = model.graph
    n = graph.num_nodes
    probs = np.empty((cfg.num_samples, n))
    for s in range(cfg.num_samples):
        logits = hg.forward(
            model, feats, dropout_rate=cfg.dropout_rate, dropout_seed=cfg.seed + 9973 * s
        ).data[0]
        dists = hg.level_distributions(logits, graph)
        row = np.empty(n)
        for members, dist in zip(graph.level_members, dists):
            row[list(members)] = dist
        probs[s] = row
    mean = probs.mean(axis=0)
    std = probs.std(axis=0)
    entropy = np.empty(len(graph.level_members))
    for d, members in enumerate(graph.level_members):
        p = mean[list(members)]
        p = p / p.sum()
        entropy[d] = float(-(p * np.log(np.maximum(p, 1e-300))).sum())
    return PredictionDistribution(
        node_ids=graph.node_ids, mean=mean, std=std, level_entropy=entropy
    )


def _candidate_windows(
    shape: tuple[int, int], x: int, y: int, sizes: Sequence[int] = WINDOW_SIZES
):
    """Centered square windows clipped to the image; deduplicated rects."""
    h, w = shape
    seen = {}
    for size in sizes:
        half = size // 2
        x0, x1 = max(0, x - half), min(w, x + half)
        y0, y1 = max(0, y - half), min(h, y + half)
        if x1 - x0 < 1 or y1 - y0 < 1:
            continue
        rect = (x0, y0, x1, y1)
        if rect not in seen:
            seen[rect] = size
    return [(rect, size) for rect, size in seen.items()]


def best_window(
    image: np.ndarray,
    coord: tuple[int, int],
    model: hg.HierGatModel,
    cfg: McConfig,
    encoder: EncoderHandle,
    sizes: Sequence[int] = WINDOW_SIZES,
):
    """The candidate window minimizing material-level predictive entropy
    (maximizing confidence); ties resolve to the smaller window."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    x, y = coord
    if not (0 <= x < w and 0 <= y < h):
        raise ProbeError(f"probe coordinate {coord} outside image {w}x{h}")
    if h < min(sizes) and w < min(sizes):
        raise ProbeError(
            f"image {w}x{h} is smaller than the smallest window {min(sizes)}"
        )
    candidates = _candidate_windows((h, w), x, y, sizes)
    best = None
    for (x0, y0, x1, y1), size in sorted(candidates, key=lambda c: c[1]):
        dist = mc_predict(model, img[y0:y1, x0:x1], cfg, encoder)
        score = dist.level_entropy[-1]
        if best is None or score < best[0] - 1e-12:
            best = (score, size, (x0, y0, x1, y1), dist)
    _, size, rect, dist = best
    return rect, size, dist


def best_first_classify(
    dist: PredictionDistribution,
    taxonomy: Taxonomy,
    threshold: float = 0.7,
    risk_weight: float = 1.0,
) -> HierarchicalPrediction:
    """Greedy root-to-leaf descent.

    At each node the child maximizing mean - risk_weight * std is considered;
    descent stops when that child's mean probability falls below the
    threshold or a leaf is reached. The root is always accepted, so the
    output is a valid parent chain whatever the distribution looks like.
    """
    index = {nid: i for i, nid in enumerate(dist.node_ids)}
    path = [taxonomy.root]
    confidences = [float(dist.mean[index[taxonomy.root]])]
    current = taxonomy.root
    while True:
        children = taxonomy.nodes[current].children
        if not children:
            break
        scores = [
            dist.mean[index[c]] - risk_weight * dist.std[index[c]] for c in children
        ]
        pick = children[int(np.argmax(scores))]
        if dist.mean[index[pick]] < threshold:
            break
        path.append(pick)
        confidences.append(float(dist.mean[index[pick]]))
        current = pick
    return HierarchicalPrediction(
        path=tuple(path),
        confidences=tuple(confidences),
        finest_confident_level=taxonomy.nodes[current].level,
    )


def annotate(
    pred: HierarchicalPrediction,
    properties: dict[str, MechanicalProperties],
    thresholds: QualityThresholds = QualityThresholds(),
) -> HierarchicalPrediction:
    """Attach qualitative mechanical tags when the accepted path ends at a
    node with a properties entry."""
    leaf = pred.path[-1]
    if leaf not in properties:
        return pred
    tags = mechanical_summary(leaf, properties, thresholds)
    return HierarchicalPrediction(
        path=pred.path,
        confidences=pred.confidences,
        finest_confident_level=pred.finest_confident_level,
        tags=tags,
    )


def probe(
    image: np.ndarray,
    coord: tuple[int, int],
    model: hg.HierGatModel,
    taxonomy: Taxonomy,
    cfg: McConfig = McConfig(),
    encoder: Optional[EncoderHandle] = None,
    properties: Optional[dict[str, MechanicalProperties]] = None,
    thresholds: QualityThresholds = QualityThresholds(),
    threshold: float = 0.7,
    risk_weight: float = 1.0,
) -> ProbeResult:
    """best_window -> best_first_classify -> annotate."""
    if encoder is None:
        from .dataio import get_encoder

        encoder = get_encoder(model.encoder_name)
    rect, size, dist = best_window(image, coord, model, cfg, encoder)
    pred = best_first_classify(dist, taxonomy, threshold, risk_weight)
    if properties:
        pred = annotate(pred, properties, thresholds)
    x, y = coord
    return ProbeResult(
        prediction=pred,
        window=(x - size // 2, y - size // 2, size),
        distribution=dist,
    )
