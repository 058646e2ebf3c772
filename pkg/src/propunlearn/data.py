"""Dataset ingestion, property-conditioned sampling and preprocessing defenses.

Two dataset shapes are handled: :class:`ImageDataset` (flattened grey images
in [0, 1]) and :class:`TabularDataset` (label-encoded columns). Every
randomised function takes an explicit seed and is a pure function of its
inputs.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import CapacityError, ParseError, RejectedInput
from .nn import LabeledDataset
from .seeding import rng as make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MISSING_TOKENS = ("", "?", "NA", "nan")


@dataclass
class ImageDataset:
    pixels: np.ndarray
    labels: np.ndarray
    height: int
    width: int
    class_count: int = 10

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 2 or self.pixels.shape[1] != self.height * self.width:
            raise RejectedInput(f"pixel rows must have {self.height}*{self.width} entries")
        if len(self.pixels) != len(self.labels):
            raise RejectedInput("pixel and label counts differ")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise RejectedInput("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        return replace(self, pixels=self.pixels[idx], labels=self.labels[idx])

    def with_pixels(self, pixels) -> "ImageDataset":
        return replace(self, pixels=pixels)

    def to_labeled(self) -> LabeledDataset:
        return LabeledDataset(self.pixels, self.labels, self.class_count)


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = "numeric"  # or "categorical"
    cardinality: int = 0
    scale: float = 1.0
    categories: tuple = ()


@dataclass
class TabularDataset:
    columns: list[Column]
    rows: np.ndarray
    label_column: int
    dropped: int = 0
    generalized: np.ndarray | None = None  # bool mask over cells rewritten by anonymisation

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, len(self.columns))

    def __len__(self):
        return len(self.rows)

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise RejectedInput(f"no column named {name!r}")

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.index(name)]

    def subset(self, idx) -> "TabularDataset":
        gen = None if self.generalized is None else self.generalized[idx]
        return replace(self, rows=self.rows[idx], generalized=gen)

    def with_rows(self, rows, generalized=None) -> "TabularDataset":
        return replace(self, rows=rows, generalized=generalized)

    def to_labeled(self) -> LabeledDataset:
        """Features = every non-label column; categoricals scaled by 1/(cardinality-1)."""
        cols = [i for i in range(len(self.columns)) if i != self.label_column]
        feats = self.rows[:, cols].copy()
        for j, i in enumerate(cols):
            c = self.columns[i]
            if c.kind == "categorical":
                feats[:, j] /= max(c.cardinality - 1, 1)
            else:
                feats[:, j] /= c.scale
        label_col = self.columns[self.label_column]
        k = label_col.cardinality if label_col.kind == "categorical" else int(self.rows[:, self.label_column].max()) + 1
        return LabeledDataset(feats, self.rows[:, self.label_column].astype(np.int64), k)


# ---------------------------------------------------------------------------
# property specs

PROPERTY_KINDS = ("class_ratio", "gaussian", "snp", "gamma", "identity")


@dataclass(frozen=True)
class PropertySpec:
    """A named distribution transformer defining one property of the training data."""

    name: str
    kind: str = "identity"
    attribute: str | tuple = ""
    ratios: Mapping = field(default_factory=dict)
    mean: float = 0.0
    sd: float = 0.0
    fraction: float = 0.0
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PROPERTY_KINDS:
            raise RejectedInput(f"unknown property kind {self.kind!r}")
        if self.kind == "class_ratio":
            vals = np.array(list(self.ratios.values()), dtype=float)
            if not self.attribute or vals.size == 0 or np.any(vals <= 0) or abs(vals.sum() - 1.0) > 1e-9:
                raise RejectedInput("class_ratio needs an attribute and positive ratios summing to 1")
        if self.kind == "gaussian" and not self.sd > 0:
            raise RejectedInput("gaussian noise needs sd > 0")
        if self.kind == "snp" and not 0.0 < self.fraction < 1.0:
            raise RejectedInput("snp fraction must lie in (0, 1)")
        if self.kind == "gamma" and not self.gamma > 0:
            raise RejectedInput("gamma must be > 0")

    def transform(self, data, seed: int):
        """Apply the pixel-level part of the property (identity for ratio properties)."""
        if self.kind == "gaussian":
            return transform_gaussian_noise(data, self.mean, self.sd, seed)
        if self.kind == "snp":
            return transform_snp(data, self.fraction, seed)
        if self.kind == "gamma":
            return transform_gamma(data, self.gamma)
        return data

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "seed": self.seed}
        if self.kind == "class_ratio":
            attr = self.attribute
            d["attribute"] = list(attr) if isinstance(attr, tuple) else attr
            d["ratios"] = {_key_str(k): float(v) for k, v in self.ratios.items()}
        elif self.kind == "gaussian":
            d.update(mean=self.mean, sd=self.sd)
        elif self.kind == "snp":
            d["fraction"] = self.fraction
        elif self.kind == "gamma":
            d["gamma"] = self.gamma
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PropertySpec":
        d = dict(d)
        if "attribute" in d and isinstance(d["attribute"], list):
            d["attribute"] = tuple(d["attribute"])
        if "ratios" in d:
            d["ratios"] = {_parse_key(k): float(v) for k, v in d["ratios"].items()}
        return cls(**d)


def _key_str(k) -> str:
    return ",".join(str(int(x)) for x in k) if isinstance(k, tuple) else str(int(k))


def _parse_key(k):
    if isinstance(k, str) and "," in k:
        return tuple(int(x) for x in k.split(","))
    return int(k)


def joint_ratio(name: str, *specs: PropertySpec, seed: int = 0) -> PropertySpec:
    """Combine independent class_ratio properties into one over the attribute tuple."""
    attrs, table = [], {(): 1.0}
    for s in specs:
        if s.kind != "class_ratio" or isinstance(s.attribute, tuple):
            raise RejectedInput("joint_ratio combines single-attribute class_ratio specs")
        attrs.append(s.attribute)
        table = {k + (v,): p * r for k, p in table.items() for v, r in s.ratios.items()}
    return PropertySpec(name, "class_ratio", attribute=tuple(attrs), ratios=table, seed=seed)


# ---------------------------------------------------------------------------
# ingestion

def _read_be_u32s(fh, n, path):
    raw = fh.read(4 * n)
    if len(raw) < 4 * n:
        raise ParseError(f"{path}: truncated header")
    return struct.unpack(f">{n}I", raw)


def load_idx(images_path, labels_path) -> ImageDataset:
    with open(images_path, "rb") as fh:
        magic, n, h, w = _read_be_u32s(fh, 4, images_path)
        if magic != IDX_IMAGES_MAGIC:
            raise ParseError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = fh.read()
    if len(raw) < n * h * w:
        raise ParseError(f"{images_path}: truncated payload ({len(raw)} of {n * h * w} bytes)")
    with open(labels_path, "rb") as fh:
        magic, m = _read_be_u32s(fh, 2, labels_path)
        if magic != IDX_LABELS_MAGIC:
            raise ParseError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        lab = fh.read()
    if len(lab) < m:
        raise ParseError(f"{labels_path}: truncated payload")
    if m != n:
        raise ParseError(f"count mismatch: {n} images but {m} labels")
    pixels = np.frombuffer(raw[: n * h * w], dtype=np.uint8).reshape(n, h * w) / 255.0
    labels = np.frombuffer(lab[:m], dtype=np.uint8).astype(np.int64)
    return ImageDataset(pixels, labels, h, w, int(labels.max()) + 1 if m else 10)


def write_idx(data: ImageDataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` (pixels are rounded to bytes)."""
    n = len(data)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, data.height, data.width))
        fh.write(np.rint(data.pixels * 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        fh.write(data.labels.astype(np.uint8).tobytes())


def load_csv(path, schema: Sequence[Mapping], label: str) -> TabularDataset:
    """Read a header-first CSV. ``schema`` lists ``{name, kind[, scale]}`` per column.

    Categorical values get indices in order of first appearance; rows with a
    missing cell are dropped and counted in ``TabularDataset.dropped``.
    """
    names = [s["name"] for s in schema]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        missing = [n for n in names if n not in header]
        if missing:
            raise ParseError(f"{path}: header lacks columns {missing}")
        pos = [header.index(n) for n in names]
        vocab = [dict() for _ in schema]
        rows, dropped = [], 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            cells = [rec[p].strip() if p < len(rec) else "" for p in pos]
            if any(c in MISSING_TOKENS for c in cells):
                dropped += 1
                continue
            out = []
            for j, (s, c) in enumerate(zip(schema, cells)):
                if s.get("kind", "numeric") == "categorical":
                    out.append(vocab[j].setdefault(c, len(vocab[j])))
                else:
                    try:
                        out.append(float(c))
                    except ValueError:
                        raise ParseError(f"{path}: row {lineno}: cannot parse {c!r} in column {s['name']!r}") from None
            rows.append(out)
    columns = []
    for s, v in zip(schema, vocab):
        if s.get("kind", "numeric") == "categorical":
            columns.append(Column(s["name"], "categorical", len(v), 1.0, tuple(v)))
        else:
            columns.append(Column(s["name"], "numeric", 0, float(s.get("scale", 1.0))))
    return TabularDataset(columns, np.array(rows, dtype=np.float64).reshape(-1, len(schema)),
                          names.index(label), dropped=dropped)


# ---------------------------------------------------------------------------
# property-conditioned sampling

def _ratio_counts(size: int, ratios: Mapping) -> dict:
    keys = list(ratios)
    exact = np.array([ratios[k] for k in keys]) * size
    counts = np.floor(exact).astype(int)
    # largest remainder, earlier keys win ties
    order = np.argsort(-(exact - counts), kind="stable")
    for i in order[: size - counts.sum()]:
        counts[i] += 1
    return dict(zip(keys, counts.tolist()))


def _attribute_values(data, attribute):
    if isinstance(data, ImageDataset):
        if attribute not in ("label", ("label",)):
            raise RejectedInput("image datasets only support ratios over 'label'")
        return data.labels[:, None]
    attrs = attribute if isinstance(attribute, tuple) else (attribute,)
    return np.stack([data.column(a) for a in attrs], axis=1)


def make_auxiliary(data, spec: PropertySpec, size: int, seed: int):
    """Draw ``size`` rows without replacement so that the result has property ``spec``."""
    if size < 0:
        raise RejectedInput("size must be >= 0")
    gen = make_rng(seed)
    if spec.kind == "class_ratio":
        values = _attribute_values(data, spec.attribute)
        picked = []
        for key, count in _ratio_counts(size, spec.ratios).items():
            key_t = key if isinstance(key, tuple) else (key,)
            pool = np.flatnonzero(np.all(values == np.array(key_t, dtype=float), axis=1))
            if len(pool) < count:
                raise CapacityError(
                    f"attribute {spec.attribute!r} value {key!r}: need {count} rows, only {len(pool)} available")
            picked.append(gen.choice(pool, size=count, replace=False))
        idx = np.concatenate(picked) if picked else np.zeros(0, dtype=int)
        idx = idx[gen.permutation(len(idx))]
        return data.subset(idx)
    if size > len(data):
        raise CapacityError(f"need {size} rows, dataset has {len(data)}")
    idx = gen.choice(len(data), size=size, replace=False)
    return spec.transform(data.subset(idx), int(gen.integers(2**63)))


# ---------------------------------------------------------------------------
# image transforms

def transform_gaussian_noise(img: ImageDataset, mean: float, sd: float, seed: int) -> ImageDataset:
    if not sd > 0:
        raise RejectedInput("sd must be > 0")
    noise = make_rng(seed).normal(mean, sd, size=img.pixels.shape)
    return img.with_pixels(np.clip(img.pixels + noise, 0.0, 1.0))


def transform_snp(img: ImageDataset, fraction: float, seed: int) -> ImageDataset:
    """Salt-and-pepper: exactly floor(fraction*h*w) distinct pixels per image, salt gets the odd one."""
    hw = img.height * img.width
    count = int(np.floor(fraction * hw))
    out = img.pixels.copy()
    if count == 0 or len(img) == 0:
        return img.with_pixels(out)
    pos = make_rng(seed).random((len(img), hw)).argsort(axis=1)[:, :count]
    n_salt = (count + 1) // 2
    rows = np.arange(len(img))[:, None]
    out[rows, pos[:, :n_salt]] = 1.0
    out[rows, pos[:, n_salt:]] = 0.0
    return img.with_pixels(out)


def transform_gamma(img: ImageDataset, gamma: float) -> ImageDataset:
    if not gamma > 0:
        raise RejectedInput("gamma must be > 0")
    return img.with_pixels(img.pixels ** gamma)


def transform_mirror(img: ImageDataset) -> ImageDataset:
    px = img.pixels.reshape(-1, img.height, img.width)[:, :, ::-1]
    return img.with_pixels(px.reshape(len(img), img.height * img.width).copy())


def downsample(img: ImageDataset, crop: int, factor: int) -> ImageDataset:
    """Crop ``crop`` pixels off every border, then average ``factor`` x ``factor`` blocks."""
    h, w = img.height - 2 * crop, img.width - 2 * crop
    if h % factor or w % factor:
        raise RejectedInput("cropped size must be divisible by factor")
    px = img.pixels.reshape(-1, img.height, img.width)[:, crop:crop + h, crop:crop + w]
    oh, ow = h // factor, w // factor
    px = px.reshape(-1, oh, factor, ow, factor).mean(axis=(2, 4))
    return ImageDataset(px.reshape(len(img), oh * ow), img.labels, oh, ow, img.class_count)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # row i averages input cells overlapping [i, i+1) * n_in / n_out, by overlap length
    edges = np.arange(n_out + 1) * n_in / n_out
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def area_resize(img: ImageDataset, height: int, width: int) -> ImageDataset:
    """Resize by area averaging (box filter); works for non-integer scale factors."""
    if height < 1 or width < 1 or height > img.height or width > img.width:
        raise RejectedInput("area_resize only shrinks images")
    R, C = _area_matrix(img.height, height), _area_matrix(img.width, width)
    px = img.pixels.reshape(-1, img.height, img.width)
    out = np.einsum("ih,nhw,jw->nij", R, px, C)
    return ImageDataset(out.reshape(len(img), height * width), img.labels, height, width, img.class_count)


def desk_mnist(seed: int = 0) -> ImageDataset:
    """The 5000-image MNIST sample bundled with mlxtend, shuffled and area-resized to 10x10."""
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    full = ImageDataset(X / 255.0, y, 28, 28)
    small = area_resize(full, 10, 10)
    return small.subset(make_rng(seed).permutation(len(small)))


# ---------------------------------------------------------------------------
# tabular transforms

def censor_attribute(table: TabularDataset, column: str, replacement: float) -> TabularDataset:
    rows = table.rows.copy()
    if len(rows):
        rows[:, table.index(column)] = replacement
    return table.with_rows(rows, table.generalized)


def mondrian_anonymize(table: TabularDataset, quasi_identifiers: Sequence[str], k: int, seed: int = 0) -> TabularDataset:
    """Relaxed multidimensional Mondrian with median splits.

    A partition is split on the quasi-identifier with the widest range
    (relative to the whole table) at its median position, as long as both
    halves keep at least ``k`` rows. Leaves are generalised: numeric QIs to
    the partition mean, categorical QIs to the partition's most common index.
    """
    if k < 1:
        raise RejectedInput("k must be >= 1")
    n = len(table)
    if n < k:
        raise CapacityError(f"table has {n} rows, fewer than k={k}")
    qi = [table.index(q) for q in quasi_identifiers]
    vals = table.rows[:, qi]
    spans = vals.max(axis=0) - vals.min(axis=0)
    spans[spans == 0] = 1.0
    # random tie-breaking order, then stable sorts keep it deterministic per seed
    base = make_rng(seed).permutation(n)
    leaves, stack = [], [base]
    while stack:
        part = stack.pop()
        if len(part) < 2 * k:
            leaves.append(part)
            continue
        sub = vals[part]
        width = (sub.max(axis=0) - sub.min(axis=0)) / spans
        for d in np.argsort(-width, kind="stable"):
            if width[d] <= 0:
                leaves.append(part)
                break
            order = part[np.argsort(sub[:, d], kind="stable")]
            mid = len(order) // 2
            # keep equal values on one side where possible (strict split), else relax
            lo_val = vals[order[mid - 1], d]
            cut = mid
            if vals[order[mid], d] == lo_val:
                strict = np.searchsorted(vals[order, d], lo_val, side="right")
                if k <= strict <= len(order) - k:
                    cut = strict
            stack.extend([order[cut:], order[:cut]])
            break
    rows = table.rows.copy()
    gen_mask = np.zeros(rows.shape, dtype=bool)
    for part in leaves:
        for j, c in zip(qi, quasi_identifiers):
            col = table.columns[j]
            cells = rows[part, j]
            if col.kind == "categorical":
                idx, counts = np.unique(cells, return_counts=True)
                rep = idx[np.argmax(counts)]
            else:
                rep = cells.mean()
            gen_mask[part, j] = cells != rep
            rows[part, j] = rep
    return table.with_rows(rows, gen_mask)


def synthesize_marginals(table: TabularDataset, n: int, seed: int) -> TabularDataset:
    """Resample every column independently from its empirical marginal."""
    gen = make_rng(seed)
    rows = np.empty((n, len(table.columns)))
    for j in range(len(table.columns)):
        rows[:, j] = gen.choice(table.rows[:, j], size=n, replace=True) if n else []
    return table.with_rows(rows)


# ---------------------------------------------------------------------------
# synthetic census generator

CENSUS_COLUMNS = [
    Column("age", "numeric", scale=100.0),
    Column("education_num", "numeric", scale=16.0),
    Column("hours_per_week", "numeric", scale=100.0),
    Column("capital_gain", "numeric", scale=10.0),
    Column("race", "categorical", 5, categories=("white", "black", "asian", "amer-indian", "other")),
    Column("sex", "categorical", 2, categories=("male", "female")),
    Column("marital_status", "categorical", 4, categories=("married", "never-married", "divorced", "widowed")),
    Column("relationship", "categorical", 6,
           categories=("husband", "wife", "own-child", "not-in-family", "unmarried", "other-relative")),
    Column("income", "categorical", 2, categories=("<=50K", ">50K")),
]
CENSUS_QUASI_IDENTIFIERS = ("age", "race", "sex", "marital_status", "relationship")
RACE_P = np.array([0.82, 0.10, 0.04, 0.02, 0.02])


def synth_census(n: int, male_female_ratio=(2, 1), seed: int = 0, race_p=None) -> TabularDataset:
    """Seeded Adult-like table: 8 attributes plus a binary income label.

    Hours, marital status, relationship and capital gain are distributed
    differently for the two sexes, and income follows a different logistic
    rule for each sex, with a further shift for non-white rows, so both the
    sex ratio and the race mix leave a footprint on trained models.
    """
    m, f = male_female_ratio
    n_male = int(round(n * m / (m + f)))
    gen = make_rng(seed)
    female = np.zeros(n)
    female[n_male:] = 1.0
    female = female[gen.permutation(n)]
    fem = female.astype(bool)

    age = np.clip(gen.normal(39.0 - 2.0 * female, 13.0), 17, 90).round()
    edu = np.clip(gen.normal(10.0 + 0.2 * female, 2.5), 1, 16).round()
    hours = np.clip(gen.normal(44.0 - 8.0 * female, 10.0), 1, 99).round()
    gain = np.clip(gen.exponential(1.0 - 0.5 * female), 0, 10) * (gen.random(n) < 0.12 - 0.05 * female)
    race = gen.choice(5, size=n, p=RACE_P if race_p is None else race_p).astype(float)

    married_p = np.where(fem, 0.30, 0.60)
    u = gen.random(n)
    marital = np.where(u < married_p, 0, np.where(u < married_p + 0.28, 1, np.where(u < married_p + 0.28 + np.where(fem, 0.28, 0.10), 2, 3)))
    rel = np.empty(n)
    is_married = marital == 0
    rel[is_married] = np.where(fem[is_married], 1, 0)
    single = ~is_married
    young = age < 25
    rel[single] = np.where(young[single], 2, np.where(gen.random(single.sum()) < np.where(fem[single], 0.45, 0.65), 3,
                                                      np.where(gen.random(single.sum()) < 0.7, 4, 5)))

    # income is driven by different coefficients per sex and race group, so a
    # small model's compromise between them depends on the group mix
    male_logit = 0.45 * (edu - 10) + 0.05 * (age - 38) + 0.06 * (hours - 40) + 1.2 * is_married + 0.6 * gain - 1.6
    female_logit = (-0.45 * (edu - 10) - 0.07 * (age - 38) + 0.36 * (hours - 40) - 3.3 * is_married
                    + 0.6 * gain - 2.1)
    race_shift = np.where(race > 0, -0.25 * (hours - 40) + 0.6 * (edu - 10) - 0.5, 0.0)
    logit = np.where(fem, female_logit, male_logit) + race_shift + gen.normal(0, 0.8, n)
    income = (logit > 0).astype(float)
    rows = np.column_stack([age, edu, hours, gain, race, female, marital, rel, income])
    return TabularDataset(list(CENSUS_COLUMNS), rows, label_column=8)
