import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lighttune.data_io import (
    TELEMETRY_SCHEMA,
    BadMagicError,
    ConfigError,
    CountMismatchError,
    RunConfig,
    TruncatedError,
    dump_model,
    find_mnist,
    load_config,
    load_cqi_table,
    load_mnist,
    load_packaged_model,
    load_scenario,
    parse_config,
    parse_cqi_table,
    parse_model,
    quantize_bler,
    read_csv,
    write_csv,
    write_idx_images,
    write_idx_labels,
)
from lighttune.ff_core import BLER_CLASSES, InputError, init_model
from lighttune.link_adapt import FeatureNormalizer

MNIST_DIR = Path("/root/data/mnist")

# --- IDX files ----------------------------------------------------------------


def _pair(tmp_path, n_img=3, n_lab=3, pixel=0):
    img, lab = tmp_path / "img", tmp_path / "lab"
    write_idx_images(img, np.full((n_img, 784), pixel, dtype=np.uint8))
    write_idx_labels(lab, np.arange(n_lab) % 10)
    return img, lab


def test_idx_fabricated_zero_images(tmp_path):
    ds = load_mnist(*_pair(tmp_path))
    assert ds.images.shape == (3, 784) and not ds.images.any()
    np.testing.assert_array_equal(ds.labels, [0, 1, 2])


def test_idx_pixel_scaling(tmp_path):
    ds = load_mnist(*_pair(tmp_path, pixel=255))
    assert np.all(ds.images == 1.0)


def test_idx_truncated(tmp_path):
    img, lab = _pair(tmp_path)
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(TruncatedError):
        load_mnist(img, lab)
    img.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedError):
        load_mnist(img, lab)


def test_idx_bad_magic(tmp_path):
    img, lab = _pair(tmp_path)
    img.write_bytes(struct.pack(">I", 0x0801) + img.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        load_mnist(img, lab)


def test_idx_count_mismatch(tmp_path):
    with pytest.raises(CountMismatchError):
        load_mnist(*_pair(tmp_path, n_img=3, n_lab=2))


@pytest.mark.skipif(not MNIST_DIR.is_dir(), reason="MNIST not present")
def test_real_mnist_sizes():
    train, test = find_mnist(MNIST_DIR)
    assert len(train) == 60000 and len(test) == 10000
    assert train.images.shape[1] == 784
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0
    assert set(np.unique(test.labels)) == set(range(10))


# --- BLER quantization --------------------------------------------------------


def test_quantize_hand_values():
    assert quantize_bler(0.0) == 0.0
    assert quantize_bler(1.0) == 0.9
    assert quantize_bler(0.25) == 0.2
    assert quantize_bler(0.26) == 0.3
    assert quantize_bler(0.04) == 0.0
    with pytest.raises(InputError):
        quantize_bler(1.01)
    with pytest.raises(InputError):
        quantize_bler(math.nan)


def test_quantize_idempotent_on_classes():
    for v in BLER_CLASSES:
        assert quantize_bler(v) == v


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_quantize_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert quantize_bler(lo) <= quantize_bler(hi)
    assert abs(quantize_bler(hi) - hi) <= 0.1 + 1e-12


# --- configs ------------------------------------------------------------------


def test_empty_config_is_defaults():
    assert parse_config("") == RunConfig()
    assert load_config(None) == RunConfig()


def test_config_values_are_typed():
    cfg = parse_config("[run]\nseed = 4\n[finetune]\ndelta = 0.2\nvariant = sign-update\n[train]\nepochs = 3\n")
    assert cfg.seed == 4 and cfg.finetune.delta == 0.2 and cfg.finetune.variant == "sign-update"
    assert cfg.train.epochs == 3 and isinstance(cfg.train.epochs, int)


def test_duplicate_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"line 3: duplicate key 'delta'"):
        parse_config("[finetune]\ndelta = 0.2\ndelta = 0.3\n")


@pytest.mark.parametrize("text,pattern", [
    ("[finetune]\nbogus = 1\n", "unknown key 'bogus'"),
    ("[nowhere]\nx = 1\n", "unknown section"),
    ("[finetune]\ndelta = abc\n", "bad number"),
    ("[finetune]\nbeta1 = 1.5\n", r"\[finetune\]"),
    ("seed = 1\n", "outside any"),
    ("[shift.x]\nsnr_low = 1\n", "integer period"),
    ("[train]\nlr = inf\n", "bad number"),
])
def test_config_errors(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_packaged_config_and_missing_name():
    cfg = load_config("s1_high_shift")
    assert cfg.shifts[200]["aging_db_per_sqrt_hz"] == "0.6"
    with pytest.raises(ConfigError):
        load_config("no_such_config")


def test_canned_scenarios_load():
    for name in ("S0", "S1", "S2"):
        spec = load_scenario(name, seed=3)
        assert spec.seed == 3
    assert not load_scenario("S0").shift_schedule
    assert load_scenario("S1").shift_schedule[0].period == 200


# --- CSV ----------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rows = [{"period": t, "algorithm": "cqi-tune", "snr": float(rng.normal()) * 1e-3, "rank": 2, "cqi": 9,
             "p_hat": 0.1, "p_true_empirical": float(rng.random()), "error": 1 / 3, "triggered": bool(t % 2),
             "throughput_bits": float(rng.random()) * 1e5, "mac_count": 23296} for t in range(50)]
    path = tmp_path / "t.csv"
    write_csv(rows, TELEMETRY_SCHEMA, path)
    back = read_csv(path)
    assert list(back[0]) == list(TELEMETRY_SCHEMA)
    for a, b in zip(rows, back):
        for key in ("snr", "p_true_empirical", "error", "throughput_bits"):
            assert abs(float(b[key]) - a[key]) <= 1e-12 * max(1.0, abs(a[key]))
        assert int(b["triggered"]) == int(a["triggered"]) and int(b["period"]) == a["period"]


def test_csv_rejects_extra_columns(tmp_path):
    with pytest.raises(InputError):
        write_csv([{"period": 0, "bogus": 1}], TELEMETRY_SCHEMA, tmp_path / "x.csv")


# --- model dump and CQI table ---------------------------------------------------


def test_model_dump_round_trip():
    m = init_model([13, 32, 32], seed=7)
    norm = FeatureNormalizer(tuple(np.linspace(-1, 1, 12)), tuple(np.linspace(0.5, 2, 12)))
    m2, norm2 = parse_model(dump_model(m, norm))
    assert m2.equal(m) and norm2 == norm
    m3, none = parse_model(dump_model(m))
    assert m3.equal(m) and none is None


def test_model_dump_errors():
    text = dump_model(init_model([3, 2], seed=0))
    with pytest.raises(InputError):
        parse_model("garbage\n" + text)
    with pytest.raises(InputError):
        parse_model(text.rsplit("\n", 2)[0])


def test_packaged_model_shape():
    m, norm = load_packaged_model()
    assert m.dims == [13, 32, 32] and norm is not None


def test_cqi_table():
    t = load_cqi_table()
    assert len(t.qm) == 15
    with pytest.raises(InputError):
        parse_cqi_table("1 2 0.5\n")
    with pytest.raises(InputError):
        parse_cqi_table("2 2 0.5 1.0\n")
    with pytest.raises(InputError):
        parse_cqi_table("1 2 0.5 1.5\n")
    rows = "".join(f"{i} {q} {r!r} {q * r!r}  # row\n" for i, (q, r) in enumerate(zip(t.qm, t.rate), start=1))
    assert parse_cqi_table("# header\n" + rows) == t
