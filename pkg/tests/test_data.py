import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propunlearn.data import (
    CENSUS_QUASI_IDENTIFIERS,
    Column,
    ImageDataset,
    PropertySpec,
    TabularDataset,
    area_resize,
    censor_attribute,
    downsample,
    joint_ratio,
    load_csv,
    load_idx,
    make_auxiliary,
    mondrian_anonymize,
    synth_census,
    synthesize_marginals,
    transform_gamma,
    transform_gaussian_noise,
    transform_mirror,
    transform_snp,
    write_idx,
)
from propunlearn.errors import CapacityError, ParseError, RejectedInput
from propunlearn.nn import Architecture, TrainConfig, evaluate, train


def image(pixels, h, w):
    pixels = np.asarray(pixels, dtype=float).reshape(-1, h * w)
    return ImageDataset(pixels, np.zeros(len(pixels), dtype=int), h, w)


def numeric_table(values, name="x"):
    cols = [Column(n) for n in name.split(",")]
    return TabularDataset(cols, np.asarray(values, dtype=float).reshape(-1, len(cols)), label_column=0)


# ---------------------------------------------------------------------------
# IDX

def test_idx_roundtrip_full_size_header(tmp_path):
    gen = np.random.default_rng(0)
    raw = gen.integers(0, 256, (10000, 28 * 28), dtype=np.uint8)
    data = ImageDataset(raw / 255.0, gen.integers(0, 10, 10000), 28, 28)
    write_idx(data, tmp_path / "img", tmp_path / "lab")
    back = load_idx(tmp_path / "img", tmp_path / "lab")
    assert len(back) == 10000 and back.height == back.width == 28
    assert np.array_equal(np.rint(back.pixels * 255).astype(np.uint8), raw)
    assert np.array_equal(back.labels, data.labels)
    assert back.pixels.min() >= 0 and back.pixels.max() <= 1


def _write_raw(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">{1 + len(dims)}I", magic, *dims))
        fh.write(payload)


def test_idx_truncated_images(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (3, 2, 2), bytes(10))
    _write_raw(tmp_path / "lab", 0x801, (3,), bytes(3))
    with pytest.raises(ParseError, match="truncated"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (6, 2, 2), bytes(24))
    _write_raw(tmp_path / "lab", 0x801, (5,), bytes(5))
    with pytest.raises(ParseError, match="count mismatch"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_bad_magic(tmp_path):
    _write_raw(tmp_path / "img", 0x801, (1, 1, 1), bytes(1))
    _write_raw(tmp_path / "lab", 0x801, (1,), bytes(1))
    with pytest.raises(ParseError, match="bad magic"):
        load_idx(tmp_path / "img", tmp_path / "lab")


# ---------------------------------------------------------------------------
# CSV

SCHEMA = [{"name": "age", "kind": "numeric", "scale": 100}, {"name": "colour", "kind": "categorical"},
          {"name": "y", "kind": "categorical"}]


def test_csv_first_appearance_order(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("age,colour,y\n30,a,no\n40,b,yes\n50,a,no\n")
    t = load_csv(p, SCHEMA, "y")
    assert t.column("colour").tolist() == [0, 1, 0]
    assert t.columns[1].categories == ("a", "b") and t.dropped == 0


def test_csv_drops_rows_with_missing_cells(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("age,colour,y\n30,a,no\n,b,yes\n50, ?,no\n60,c,yes\n")
    t = load_csv(p, SCHEMA, "y")
    assert len(t) == 2 and t.dropped == 2


def test_csv_unparseable_numeric_names_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("age,colour,y\n30,a,no\nold,b,yes\n")
    with pytest.raises(ParseError, match="row 3"):
        load_csv(p, SCHEMA, "y")


def test_csv_header_must_match_schema(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("age,y\n30,no\n")
    with pytest.raises(ParseError, match="colour"):
        load_csv(p, SCHEMA, "y")


# ---------------------------------------------------------------------------
# make_auxiliary

SEX_1_1 = PropertySpec("1:1", "class_ratio", attribute="sex", ratios={0: 0.5, 1: 0.5})
SEX_2_1 = PropertySpec("2:1", "class_ratio", attribute="sex", ratios={0: 2 / 3, 1: 1 / 3})


@pytest.fixture(scope="module")
def census():
    return synth_census(40000, (1, 1), seed=3)


@pytest.mark.parametrize("spec,expected", [(SEX_1_1, (7500, 7500)), (SEX_2_1, (10000, 5000))])
def test_aux_sex_ratio_counts(census, spec, expected):
    aux = make_auxiliary(census, spec, 15000, seed=1)
    sex = aux.column("sex")
    assert (int((sex == 0).sum()), int((sex == 1).sum())) == expected


def test_aux_size_zero_is_empty(census):
    assert len(make_auxiliary(census, SEX_1_1, 0, seed=0)) == 0


def test_aux_capacity_error_names_value():
    t = synth_census(100, (1, 1), seed=0)
    with pytest.raises(CapacityError, match="'sex' value 0: need 60"):
        make_auxiliary(t, SEX_2_1, 90, seed=0)


@settings(max_examples=30, deadline=None)
@given(size=st.integers(0, 3000), a=st.floats(0.05, 0.95), seed=st.integers(0, 2**31))
def test_aux_ratio_within_one_row_and_distinct(census, size, a, seed):
    spec = PropertySpec("p", "class_ratio", attribute="sex", ratios={0: a, 1: 1 - a})
    aux = make_auxiliary(census, spec, size, seed)
    assert len(aux) == size
    sex = aux.column("sex")
    assert abs((sex == 0).sum() - a * size) <= 1 and abs((sex == 1).sum() - (1 - a) * size) <= 1


def test_aux_samples_without_replacement(census):
    tagged = TabularDataset(census.columns + [Column("id")],
                            np.column_stack([census.rows, np.arange(len(census))]), census.label_column)
    aux = make_auxiliary(tagged, SEX_2_1, 3000, seed=4)
    assert len(np.unique(aux.column("id"))) == 3000


def test_aux_is_seeded(census):
    a = make_auxiliary(census, SEX_1_1, 500, seed=9)
    b = make_auxiliary(census, SEX_1_1, 500, seed=9)
    c = make_auxiliary(census, SEX_1_1, 500, seed=10)
    assert np.array_equal(a.rows, b.rows) and not np.array_equal(a.rows, c.rows)


def test_joint_ratio_product(census):
    race = PropertySpec("r", "class_ratio", attribute="race", ratios={0: 0.8, 1: 0.2})
    spec = joint_ratio("j", SEX_1_1, race)
    assert spec.ratios[(0, 0)] == pytest.approx(0.4) and spec.attribute == ("sex", "race")
    aux = make_auxiliary(census, spec, 1000, seed=0)
    assert int(((aux.column("sex") == 1) & (aux.column("race") == 1)).sum()) == 100


def test_property_spec_validation():
    with pytest.raises(RejectedInput):
        PropertySpec("p", "class_ratio", attribute="sex", ratios={0: 0.5, 1: 0.6})
    with pytest.raises(RejectedInput):
        PropertySpec("p", "gaussian", sd=0.0)
    with pytest.raises(RejectedInput):
        PropertySpec("p", "snp", fraction=1.0)
    with pytest.raises(RejectedInput):
        PropertySpec("p", "gamma", gamma=0.0)


def test_property_spec_dict_roundtrip():
    spec = joint_ratio("j", SEX_1_1, PropertySpec("r", "class_ratio", attribute="race", ratios={0: 1.0}))
    assert PropertySpec.from_dict(spec.to_dict()) == spec


# ---------------------------------------------------------------------------
# image transforms

def test_gaussian_tiny_sd_is_identity():
    img = image(np.linspace(0, 1, 16), 4, 4)
    out = transform_gaussian_noise(img, 0.0, 1e-12, seed=0)
    assert np.allclose(out.pixels, img.pixels, atol=1e-9)


def test_gaussian_on_zero_image_matches_clamped_normal_mean():
    out = transform_gaussian_noise(image(np.zeros(10000), 100, 100), 35 / 255, 10 / 255, seed=0)
    assert abs(out.pixels.mean() - 0.137) <= 0.01


def test_gaussian_on_white_image_stays_white():
    # sd small against the mean, so no noise sample is negative
    out = transform_gaussian_noise(image(np.ones(25), 5, 5), 0.2, 0.01, seed=3)
    assert np.all(out.pixels == 1.0)


def test_gaussian_rejects_nonpositive_sd():
    with pytest.raises(RejectedInput):
        transform_gaussian_noise(image(np.ones(4), 2, 2), 0.0, 0.0, seed=0)


def test_snp_zero_count_is_unchanged():
    img = image(np.full(100, 0.5), 10, 10)
    assert np.array_equal(transform_snp(img, 0.009, seed=0).pixels, img.pixels)


def test_snp_replaces_exactly_five_and_five():
    img = image(np.full((3, 100), 0.5), 10, 10)
    for seed in (0, 1):
        out = transform_snp(img, 0.10, seed).pixels
        assert np.all((out == 1.0).sum(axis=1) == 5) and np.all((out == 0.0).sum(axis=1) == 5)
    assert not np.array_equal(transform_snp(img, 0.1, 0).pixels, transform_snp(img, 0.1, 1).pixels)


def test_snp_odd_count_gives_salt_the_extra():
    out = transform_snp(image(np.full(100, 0.5), 10, 10), 0.07, seed=2).pixels
    assert (out == 1.0).sum() == 4 and (out == 0.0).sum() == 3


def test_gamma_examples():
    img = image([0.0, 0.5, 1.0, 0.3], 2, 2)
    assert np.array_equal(transform_gamma(img, 1.0).pixels, img.pixels)
    out = transform_gamma(img, 5.0).pixels[0]
    assert out[1] == 0.03125 and out[0] == 0.0 and out[2] == 1.0 and out[3] < 0.3


def test_mirror_examples():
    img = image([0.1, 0.2, 0.3, 0.4], 2, 2)
    assert transform_mirror(img).pixels.tolist() == [[0.2, 0.1, 0.4, 0.3]]
    sym = image([0.1, 0.1, 0.7, 0.7], 2, 2)
    assert np.array_equal(transform_mirror(sym).pixels, sym.pixels)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 6), w=st.integers(1, 6), n=st.integers(0, 4))
def test_image_transforms_preserve_shape_and_range(seed, h, w, n):
    img = ImageDataset(np.random.default_rng(seed).random((n, h * w)), np.zeros(n, dtype=int), h, w)
    outs = [transform_gaussian_noise(img, 0.1, 0.3, seed), transform_snp(img, 0.3, seed),
            transform_gamma(img, 3.0), transform_mirror(img)]
    for out in outs:
        assert out.pixels.shape == img.pixels.shape and (out.height, out.width) == (h, w)
        assert np.all((out.pixels >= 0) & (out.pixels <= 1))
    assert np.array_equal(transform_mirror(outs[3]).pixels, img.pixels)
    assert np.array_equal(transform_snp(img, 0.3, seed).pixels, outs[1].pixels)


def test_image_dataset_rejects_out_of_range():
    with pytest.raises(RejectedInput):
        image([1, 2, 3, 4], 2, 2)


def test_area_resize_matches_block_mean_for_integer_factor():
    img = image(np.random.default_rng(0).random((2, 64)), 8, 8)
    assert np.allclose(area_resize(img, 4, 4).pixels, downsample(img, 0, 2).pixels)


def test_area_resize_fractional_factor_preserves_mean():
    img = image(np.random.default_rng(1).random((3, 28 * 28)), 28, 28)
    out = area_resize(img, 10, 10)
    assert out.pixels.shape == (3, 100)
    assert np.allclose(out.pixels.mean(axis=1), img.pixels.mean(axis=1))
    with pytest.raises(RejectedInput):
        area_resize(img, 30, 30)


# ---------------------------------------------------------------------------
# tabular transforms

def test_censor_examples():
    t = numeric_table([[0], [1], [1]], "sex")
    once = censor_attribute(t, "sex", 0.5)
    assert once.column("sex").tolist() == [0.5, 0.5, 0.5]
    assert np.array_equal(censor_attribute(once, "sex", 0.5).rows, once.rows)
    assert len(censor_attribute(numeric_table(np.zeros((0, 1)), "sex"), "sex", 0.5)) == 0


def test_censor_leaves_other_columns():
    t = synth_census(50, (1, 1), seed=0)
    out = censor_attribute(t, "sex", 0.5)
    other = [i for i in range(len(t.columns)) if i != t.index("sex")]
    assert np.array_equal(out.rows[:, other], t.rows[:, other])


def test_mondrian_hand_example():
    t = numeric_table([[1], [2], [3], [10], [11], [12]], "q")
    out = mondrian_anonymize(t, ["q"], 3, seed=0)
    assert out.column("q").tolist() == [2, 2, 2, 11, 11, 11]


def test_mondrian_k1_and_kn():
    t = numeric_table([[1, 5], [2, 7], [4, 9], [8, 1]], "a,b")
    assert np.array_equal(mondrian_anonymize(t, ["a", "b"], 1, seed=0).rows, t.rows)
    whole = mondrian_anonymize(t, ["a", "b"], 4, seed=0)
    assert np.allclose(whole.rows, np.tile(t.rows.mean(axis=0), (4, 1)))


def test_mondrian_rejects_small_tables():
    with pytest.raises(CapacityError):
        mondrian_anonymize(numeric_table([[1], [2]], "q"), ["q"], 3)
    with pytest.raises(RejectedInput):
        mondrian_anonymize(numeric_table([[1], [2]], "q"), ["q"], 0)


def test_mondrian_flags_generalized_categoricals():
    t = synth_census(200, (1, 1), seed=5)
    out = mondrian_anonymize(t, CENSUS_QUASI_IDENTIFIERS, 10, seed=0)
    changed = out.rows != t.rows
    assert np.array_equal(changed, out.generalized)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(5, 150), k=st.integers(1, 12))
def test_mondrian_is_k_anonymous(seed, n, k):
    if n < k:
        return
    t = synth_census(n, (1, 1), seed=seed)
    out = mondrian_anonymize(t, CENSUS_QUASI_IDENTIFIERS, k, seed=seed)
    qi = [out.index(q) for q in CENSUS_QUASI_IDENTIFIERS]
    counts = Counter(map(tuple, out.rows[:, qi]))
    assert min(counts.values()) >= k


def test_marginals_break_correlation():
    x = np.arange(10000, dtype=float)
    t = numeric_table(np.column_stack([x, 2 * x]), "a,b")
    out = synthesize_marginals(t, 10000, seed=0)
    assert abs(np.corrcoef(out.rows.T)[0, 1]) < 0.05


def test_marginals_small_cases():
    t = numeric_table([[1], [2], [3]], "a")
    assert len(synthesize_marginals(t, 0, seed=0)) == 0
    out = synthesize_marginals(t, 50, seed=1)
    assert set(out.column("a")) <= {1.0, 2.0, 3.0} and len(out) == 50


# ---------------------------------------------------------------------------
# synthetic census

def test_synth_census_ratio_and_determinism():
    t = synth_census(1000, (1, 1), seed=0)
    assert int((t.column("sex") == 1).sum()) == 500
    assert np.array_equal(t.rows, synth_census(1000, (1, 1), seed=0).rows)
    t2 = synth_census(1000, (2, 1), seed=0)
    assert abs((t2.column("sex") == 0).sum() - 2000 / 3) <= 1


def test_synth_census_is_learnable_by_a_one_layer_net():
    train_set = synth_census(10000, (2, 1), seed=1).to_labeled()
    test_set = synth_census(4000, (2, 1), seed=2).to_labeled()
    net = Architecture(8, (2,), ("softmax",)).build(0)
    net, _ = train(net, train_set, TrainConfig(0.05, 32, 5, seed=0, optimizer="sgd_momentum", momentum=0.9))
    assert evaluate(net, test_set) >= 0.75
