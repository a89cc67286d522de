"""Procedurally rendered 28x28 handwritten-style digits.

Each digit is a set of stroke paths in unit coordinates. Samples are drawn
by jittering the strokes with a random affine map (rotation, scale, shear,
small shift), stamping a soft round brush along the paths, and adding
illumination ramps and sensor noise. Like scanned forms, images share a
common frame, and a fraction carry a bleed-through "ghost" of another class
at a random strength, which makes classes confusable at a controlled rate.
The result is a self-contained, seed-reproducible stand-in for a scanned
digit corpus, suitable for desk-scale classifier experiments.
"""

from pathlib import Path

import numpy as np

from .seeding import stream_rng

DIGIT_NAMES = ("zero", "one", "two", "three", "four",
               "five", "six", "seven", "eight", "nine")


def _line(x0, y0, x1, y1, n=40):
    t = np.linspace(0.0, 1.0, n)
    return np.stack([x0 + (x1 - x0) * t, y0 + (y1 - y0) * t], axis=1)


def _arc(cx, cy, rx, ry, a0, a1, n=60):
    t = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


_TAU = 2 * np.pi

# Stroke skeletons per digit, in [0, 1]^2 with y pointing down.
_GLYPHS = {
    0: [_arc(0.50, 0.50, 0.26, 0.36, 0, _TAU)],
    1: [_line(0.34, 0.30, 0.52, 0.13), _line(0.52, 0.13, 0.52, 0.87)],
    2: [_arc(0.50, 0.34, 0.24, 0.22, np.pi, _TAU),
        _line(0.74, 0.34, 0.27, 0.86), _line(0.27, 0.86, 0.76, 0.86)],
    3: [_arc(0.48, 0.31, 0.23, 0.19, 0.80 * np.pi, 1.95 * np.pi),
        _arc(0.48, 0.68, 0.25, 0.21, -0.45 * np.pi, 0.85 * np.pi)],
    4: [_line(0.60, 0.12, 0.22, 0.58), _line(0.22, 0.58, 0.80, 0.58),
        _line(0.62, 0.33, 0.62, 0.88)],
    5: [_line(0.72, 0.14, 0.33, 0.14), _line(0.33, 0.14, 0.31, 0.45),
        _arc(0.47, 0.64, 0.24, 0.22, -0.55 * np.pi, 0.80 * np.pi)],
    6: [_line(0.62, 0.12, 0.40, 0.44), _arc(0.50, 0.65, 0.22, 0.22, 0, _TAU)],
    7: [_line(0.26, 0.15, 0.76, 0.15), _line(0.76, 0.15, 0.42, 0.87)],
    8: [_arc(0.50, 0.31, 0.19, 0.18, 0, _TAU),
        _arc(0.50, 0.68, 0.23, 0.20, 0, _TAU)],
    9: [_arc(0.50, 0.36, 0.21, 0.21, 0, _TAU), _line(0.71, 0.40, 0.58, 0.86)],
}


def _stroke_field(digit, rng, size):
    """Brush intensity in [0, 1] for one jittered glyph.

    Glyphs stay registered (small shifts only), the way scanned forms or
    radiographs share a common frame; variability comes from rotation,
    scale, shear, stroke wobble and brush width.
    """
    pts = np.concatenate(_GLYPHS[digit])

    angle = rng.uniform(-0.15, 0.15)
    scale = rng.uniform(0.75, 1.05)
    shear = rng.uniform(-0.20, 0.20)
    shift = rng.uniform(-0.02, 0.02, size=2)
    c, s = np.cos(angle), np.sin(angle)
    mat = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    pts = (pts - 0.5) @ mat.T + 0.5 + shift

    # Smooth handwriting-style wobble along the strokes.
    wamp = rng.uniform(0.0, 0.030, size=2)
    wfreq = rng.uniform(2.0, 5.0, size=2)
    wphase = rng.uniform(0.0, _TAU, size=2)
    pts = pts + np.stack([
        wamp[0] * np.sin(wfreq[0] * _TAU * pts[:, 1] + wphase[0]),
        wamp[1] * np.sin(wfreq[1] * _TAU * pts[:, 0] + wphase[1])], axis=1)

    grid = (np.stack(np.meshgrid(np.arange(size), np.arange(size),
                                 indexing="xy"), axis=-1) + 0.5) / size
    d2 = ((grid.reshape(-1, 1, 2) - pts.reshape(1, -1, 2)) ** 2).sum(axis=2)
    d2 = d2.min(axis=1).reshape(size, size)
    sigma = rng.uniform(0.024, 0.052)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _finish(img, rng, size):
    # Uneven illumination plus sensor-style noise.
    ramp = rng.uniform(0.0, 24.0, size=3)
    xs = np.linspace(0.0, 1.0, size)
    img = img + ramp[0] + ramp[1] * xs[None, :] + ramp[2] * xs[:, None]
    img += rng.normal(0.0, 7.0, size=(size, size))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _compose(base, overlay, margin_range, rng, size):
    """Base glyph plus an optional second glyph at a contrast margin.

    The overlay's brightness is the base's minus `margin` (in fractions of
    full scale; negative margins make the overlay brighter). The margin is
    the knob that controls how confusable the image is.
    """
    brightness = rng.uniform(140.0, 255.0)
    img = brightness * _stroke_field(base, rng, size)
    if overlay is not None:
        margin = rng.uniform(*margin_range) * 255.0
        img += max(brightness - margin, 0.0) * _stroke_field(overlay, rng, size)
    return _finish(img, rng, size)


def _render(digit, rng, size, others, ghost_prob, ghost_margin):
    if others and rng.uniform() < ghost_prob:
        other = others[rng.integers(0, len(others))]
        return _compose(digit, other, ghost_margin, rng, size)
    return _compose(digit, None, (0, 0), rng, size)


def render_digits(counts, seed=0, size=28, ghost_prob=1.0,
                  ghost_margin=(0.0, 0.19), ghost_pairs=None):
    """Render a digit corpus.

    Parameters
    ----------
    counts : dict mapping digit (0-9) to the number of samples to render
    seed : int, seeds the "digit-corpus" stream
    size : image side length in pixels
    ghost_prob : fraction of images carrying a bleed-through ghost
    ghost_margin : (low, high) contrast margin between the true digit and
        its ghost, as a fraction of full scale; smaller margins make images
        harder to classify and easier to attack
    ghost_pairs : dict mapping a digit to the tuple of digits that may bleed
        through onto it; by default every other digit in `counts` may.
        Digits mapped to an empty tuple stay ghost-free.

    Returns
    -------
    images : uint8 array (N, size, size), grouped by digit in `counts` order
    labels : uint8 array (N,) of raw digit values
    """
    rng = stream_rng(seed, "digit-corpus")
    digits = list(counts)
    images, labels = [], []
    for digit, count in counts.items():
        if digit not in _GLYPHS:
            raise ValueError(f"no glyph for digit {digit}")
        if ghost_pairs is None:
            others = [d for d in digits if d != digit]
        else:
            others = [d for d in ghost_pairs.get(digit, ()) if d in _GLYPHS]
        for _ in range(int(count)):
            images.append(_render(digit, rng, size, others, ghost_prob,
                                  ghost_margin))
            labels.append(digit)
    return np.stack(images), np.asarray(labels, dtype=np.uint8)


# Contrast-margin ranges for the scan-style corpus, in fractions of full
# scale. Majors bleed through onto each other from a margin of zero upward
# (a continuum of confusability); a dimmer minority pattern shows on some
# major images; true minority images are a major base with the minority
# pattern at full strength on top. Every class boundary therefore has images
# arbitrarily close to it, which is what iterative perturbation growth
# feeds on.
SCAN_MARGINS = {
    "major_major": (0.0, 0.19),
    "minority_trace": (0.01, 0.24),
    "minority_overlay": (-0.10, 0.03),
}


def render_scan_digits(counts, majors=(1, 7), minority=8, seed=0, size=28,
                       margins=SCAN_MARGINS):
    """Render the overlay-style corpus used by the desk experiments.

    Majority-class images are a major glyph plus one bleed-through ghost:
    the other major (margin "major_major") or a dim minority pattern
    (margin "minority_trace"), an even split. Minority images are a random
    major base with the minority glyph overlaid at close to full strength
    ("minority_overlay"), i.e. the minority class is defined by the
    presence of its pattern, not the absence of others.
    """
    rng = stream_rng(seed, "digit-corpus")
    images, labels = [], []
    for digit, count in counts.items():
        for _ in range(int(count)):
            if digit == minority:
                base = majors[rng.integers(0, len(majors))]
                images.append(_compose(base, minority,
                                       margins["minority_overlay"], rng, size))
            else:
                other = [m for m in majors if m != digit][0]
                if rng.uniform() < 0.5:
                    images.append(_compose(digit, other,
                                           margins["major_major"], rng, size))
                else:
                    images.append(_compose(digit, minority,
                                           margins["minority_trace"], rng,
                                           size))
            labels.append(digit)
    return np.stack(images), np.asarray(labels, dtype=np.uint8)


def write_corpus(root, digits=(1, 7, 8), names=("one", "seven", "eight"),
                 train_counts=(2970, 2970, 600), test_counts=(450, 450, 100),
                 caps=None, seed=0):
    """Write a rendered train/test corpus as IDX pairs plus JSON manifests.

    Uses the overlay-style corpus (see render_scan_digits): two mutually
    confusable majority classes and a presence-defined minority class.
    `caps` (class name -> max training images) shapes class imbalance at
    load time without touching the stored files. Returns the two manifest
    paths. Train and test draws use sub-streams `seed` and `seed + 1`.
    """
    from .data_io import DatasetManifest, write_idx, write_manifest

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    classes = [[int(d), str(n)] for d, n in zip(digits, names)]
    paths = []
    for split, counts, split_seed in (("train", train_counts, seed),
                                      ("test", test_counts, seed + 1)):
        images, labels = render_scan_digits(dict(zip(digits, counts)),
                                            majors=digits[:2],
                                            minority=digits[2],
                                            seed=split_seed)
        write_idx(root / f"{split}-images.idx", images)
        write_idx(root / f"{split}-labels.idx", labels)
        manifest = DatasetManifest(
            format="idx", classes=classes,
            images=root / f"{split}-images.idx",
            labels=root / f"{split}-labels.idx",
            caps=dict(caps or {}) if split == "train" else {},
            split=split)
        path = root / f"{split}_manifest.json"
        write_manifest(path, manifest)
        paths.append(path)
    return tuple(paths)
