"""Synthetic toy data: a small grammar of coloured shapes and region
features that encode each image's attributes."""

import itertools

import numpy as np

from .data import CaptionRecord
from .encoder import FeatureSet

COLORS = ("red", "blue", "green", "yellow")
SHAPES = ("cube", "ball", "cone", "ring")
SIDES = ("left", "right")

CAPTION = "a {color} {shape} on the {side}"
CORPUS_TEMPLATES = (
    "a {color} {shape} on the {side}",
    "the {color} {shape} is on the {side}",
    "there is a {color} {shape}",
    "a {shape} on the {side}",
    "the {shape} is {color}",
)


def scenes():
    return list(itertools.product(COLORS, SHAPES, SIDES))


def make_corpus(n, rng):
    """``n`` sentences sampled from the toy grammar."""
    out = []
    for _ in range(n):
        tmpl = CORPUS_TEMPLATES[rng.integers(len(CORPUS_TEMPLATES))]
        out.append(tmpl.format(
            color=COLORS[rng.integers(len(COLORS))],
            shape=SHAPES[rng.integers(len(SHAPES))],
            side=SIDES[rng.integers(len(SIDES))],
        ))
    return out


def make_pairs(n, rng, d_in=16, noise=0.1):
    """``n`` distinct scenes as (FeatureSet, CaptionRecord) pairs.

    Three regions per image carry a colour, shape and side prototype
    respectively, plus Gaussian noise.
    """
    all_scenes = scenes()
    if n > len(all_scenes):
        raise ValueError(f"only {len(all_scenes)} distinct scenes available")
    protos = {v: rng.normal(0.0, 1.0, d_in) for v in COLORS + SHAPES + SIDES}
    chosen = [all_scenes[i] for i in np.sort(rng.permutation(len(all_scenes))[:n])]
    feats, records = [], []
    for k, (color, shape, side) in enumerate(chosen):
        image_id = f"img{k:03d}"
        regions = np.stack([protos[color], protos[shape], protos[side]])
        regions = regions + rng.normal(0.0, noise, regions.shape)
        feats.append(FeatureSet(image_id, regions))
        records.append(CaptionRecord(image_id, CAPTION.format(color=color, shape=shape, side=side)))
    return feats, records
