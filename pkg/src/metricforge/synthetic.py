"""Deterministic synthetic manifests for demos, smoke tests, and sweeps.

Each prompt group gets one generated prompt sentence and ``per_group``
"images" of random token features. Scores are smooth functions of the mean
image-feature vector along per-metric directions that share a common
component, so the metrics correlate with each other and a small model can
actually learn them. Everything derives from splitmix64, so a seed fixes the
dataset bit-for-bit.
"""

from __future__ import annotations

import argparse
import math

import numpy as np

from .dataset import Manifest, SampleRecord, write_manifest
from .prng import SplitMix64, derive_seed

_ADJECTIVES = ("misty", "golden", "quiet", "vivid", "ancient", "neon",
               "frozen", "lush", "dusty", "radiant")
_SUBJECTS = ("harbor", "forest", "market", "skyline", "canyon", "library",
             "garden", "lighthouse", "workshop", "meadow")
_STYLES = ("digital art", "oil painting", "studio photo", "watercolor",
           "3d render", "sketch")

DEFAULT_METRICS = ("quality", "alignment", "authenticity")


def _unit(rng: SplitMix64, n: int) -> np.ndarray:
    v = rng.uniform(-1.0, 1.0, (n,))
    return v / np.linalg.norm(v)


def make_synthetic_manifest(n_groups: int = 8, per_group: int = 4,
                            d_in: int = 16, image_tokens: int = 5,
                            seed: int = 0,
                            metric_names: tuple[str, ...] = DEFAULT_METRICS,
                            score_range: tuple[float, float] = (1.0, 5.0),
                            prompt_text: str | None = None,
                            label_gain: float = 4.0) -> Manifest:
    """Build an in-memory manifest with inline features and learnable scores.

    Passing ``prompt_text`` pins every record to that one prompt (a single
    group), which is what matching-style fixtures need; leave it None for a
    splittable multi-group set.
    """
    if prompt_text is not None and n_groups != 1:
        n_groups = 1
    rng = SplitMix64(derive_seed(seed, "synthetic-manifest"))
    mix = _unit(rng, d_in)
    directions = []
    for _ in metric_names:
        own = _unit(rng, d_in)
        u = 0.7 * mix + 0.7 * own
        directions.append(u / np.linalg.norm(u))
    offsets = [rng.uniform(-0.3, 0.3) for _ in metric_names]
    lo, hi = float(score_range[0]), float(score_range[1])
    mid, half = 0.5 * (lo + hi), 0.45 * (hi - lo)
    # spread the projection to roughly unit scale before the squash
    z_scale = label_gain * math.sqrt(image_tokens)

    records = []
    for g in range(n_groups):
        if prompt_text is not None:
            text = prompt_text
        else:
            text = (f"{_ADJECTIVES[rng.randrange(len(_ADJECTIVES))]} "
                    f"{_SUBJECTS[rng.randrange(len(_SUBJECTS))]} scene {g:02d}, "
                    f"{_STYLES[rng.randrange(len(_STYLES))]}")
        for k in range(per_group):
            feats = rng.uniform(-1.0, 1.0, (image_tokens, d_in))
            v = feats.mean(axis=0)
            mos = {}
            for m, (name, u) in enumerate(zip(metric_names, directions)):
                z = z_scale * float(v @ u) + offsets[m]
                mos[name] = mid + half * math.tanh(z)
            records.append(SampleRecord(
                sample_id=f"s{g:03d}_{k:02d}",
                prompt_id=f"p{g:03d}",
                prompt_text=text,
                feature_ref=[[float(x) for x in row] for row in feats],
                mos=mos,
            ))
    return Manifest(records=tuple(records), metric_names=tuple(metric_names),
                    score_range={m: (lo, hi) for m in metric_names})


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Write a synthetic metricforge manifest (JSON-lines).")
    parser.add_argument("out", help="output manifest path")
    parser.add_argument("--groups", type=int, default=8)
    parser.add_argument("--per-group", type=int, default=4)
    parser.add_argument("--d-in", type=int, default=16)
    parser.add_argument("--image-tokens", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--prompt-text", default=None,
                        help="pin every record to this one prompt")
    args = parser.parse_args(argv)
    manifest = make_synthetic_manifest(
        n_groups=args.groups, per_group=args.per_group, d_in=args.d_in,
        image_tokens=args.image_tokens, seed=args.seed,
        prompt_text=args.prompt_text)
    write_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} records ({args.groups} groups) to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
