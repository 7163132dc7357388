import numpy as np
import pytest
from PIL import Image

from brushforge.convnet import NetConfig, Phase, TrainSchedule
from brushforge.experiments import (ARTIST_COLORS, REFERENCE_LADDER, REFERENCE_MAP_SHAPE,
                                    ExperimentConfig, config_from_dict, confidence_alpha,
                                    cross_region_point, default_ladder, derive_seed,
                                    ensemble_plan, imf_sweep, mle_probabilities,
                                    painting_probabilities, parse_channel, patch_size_sweep,
                                    prepare_paintings, render_attribution_map, run_point,
                                    write_rows_csv)
from brushforge.patching import RegionClass
from brushforge.synth import CanvasSpec, make_corpus, preset_profiles

DESK = ExperimentConfig(
    net=NetConfig(input_side_px=16, conv_filters=(4,), dense_units=8),
    schedule=TrainSchedule((Phase(1e-3, 2),)), ensemble_size=1, trials=1,
    detrend_radius_px=40)


@pytest.fixture(scope="module")
def paintings():
    corpus = make_corpus(preset_profiles("separable"), CanvasSpec(width_px=160, height_px=200),
                         seed=1)
    return prepare_paintings(corpus, 40)


def test_confidence_alpha():
    np.testing.assert_allclose(confidence_alpha([0.25, 1.0, 0.625, 0.1]), [0, 1, 0.5, 0])


def test_map_always_artist_one_is_red():
    base = np.random.default_rng(0).random((30, 40))
    coords = [(r, c) for r in range(3) for c in range(4)]
    img = render_attribution_map(base, np.tile([1.0, 0, 0, 0], (12, 1)), coords, 10)
    assert img.shape == (30, 40, 4)
    assert np.all(img[..., :3] == ARTIST_COLORS[0]) and np.all(img[..., 3] == 255)


def test_map_uniform_probabilities_transparent(tmp_path):
    base = np.random.default_rng(1).random((25, 25))
    coords = [(r, c) for r in range(2) for c in range(2)]
    img = render_attribution_map(base, np.full((4, 4), 0.25), coords, 10, tmp_path / "m.png")
    gray = np.rint(base * 255).astype(np.uint8)
    for ch in range(3):
        np.testing.assert_array_equal(img[..., ch], gray)
    back = np.asarray(Image.open(tmp_path / "m.png"))
    assert back.shape == (25, 25, 4) and np.array_equal(back, img)


def test_map_palette():
    assert ARTIST_COLORS == ((214, 39, 40), (255, 127, 14), (44, 160, 44), (31, 119, 180))
    probs = np.eye(4)
    img = render_attribution_map(np.zeros((10, 40)), probs, [(0, c) for c in range(4)], 10)
    for k in range(4):
        assert tuple(img[5, 10 * k + 5, :3]) == ARTIST_COLORS[k]


def test_mle_probabilities_softmax():
    p = mle_probabilities(np.array([[-1000.0, -1000.0, -2000.0, -1000.0 - np.log(2)]]))
    np.testing.assert_allclose(p, [[0.4, 0.4, 0.0, 0.2]], atol=1e-12)


def test_ladders_and_plans():
    assert default_ladder(REFERENCE_MAP_SHAPE) == REFERENCE_LADDER
    lad = default_ladder((750, 600))
    assert lad[0] == 10 and lad[-1] <= np.sqrt(750 * 600 / 5) and len(lad) >= 5
    assert list(lad) == sorted(set(lad))
    assert [ensemble_plan(s) for s in (10, 20, 40, 80, 100)] == [
        (10, 1), (20, 1), (20, 2), (20, 4), (20, 5)]


def test_seeds_and_config_roundtrip():
    assert derive_seed(3, "trial", 40, 0) == derive_seed(3, "trial", 40, 0)
    assert derive_seed(3, "trial", 40, 0) != derive_seed(3, "trial", 40, 1)
    assert config_from_dict(DESK.to_dict()) == DESK
    assert parse_channel("imf:3") == ("imf", 3)
    for bad in ("rgb", "imf:0"):
        with pytest.raises(ValueError):
            parse_channel(bad)
    with pytest.raises(ValueError):
        ExperimentConfig(trials=0)
    with pytest.raises(ValueError):
        ExperimentConfig(patch_sizes=())


def test_prepare_sorted(paintings):
    assert [p.artist_id for p in paintings] == [1] * 3 + [2] * 3 + [3] * 3 + [4] * 3
    assert all(0 <= p.normalized.min() and p.normalized.max() <= 1 for p in paintings)


def test_run_point_mle_deterministic(paintings):
    a = run_point(DESK, paintings, 40, 5, "mle")
    b = run_point(DESK, paintings, 40, 5, "mle")
    assert a.pairs == b.pairs and a.n_test == 4 * 4 * 5
    assert 0 <= a.report.accuracy <= 1


def test_run_point_errors(paintings):
    with pytest.raises(ValueError):
        run_point(DESK, paintings, 500, 0, "mle")
    with pytest.raises(ValueError):
        run_point(DESK, paintings[1:], 40, 0, "mle")


def test_shuffled_labels_hit_chance(paintings):
    accs = [run_point(DESK, paintings, 10, s, "mle", shuffle_labels=True).report.accuracy
            for s in range(3)]
    n = 4 * 20 * 16
    ci = 3 * np.sqrt(0.25 * 0.75 / n)
    assert all(abs(a - 0.25) <= ci for a in accs)


def test_run_point_cnn_deterministic(paintings):
    a = run_point(DESK, paintings, 40, 2, "cnn")
    b = run_point(DESK, paintings, 40, 2, "cnn")
    assert a.pairs == b.pairs and a.report.accuracy == b.report.accuracy
    assert a.n_train > 0 and a.n_test == 80


def test_patch_sweep_outputs(paintings, tmp_path):
    cfg = ExperimentConfig(patch_sizes=(20, 40), classifier="mle", trials=2,
                           detrend_radius_px=40)
    rows = patch_size_sweep(cfg, paintings, tmp_path)
    assert [r["patch_px"] for r in rows] == [20, 40]
    assert all(r["trials"] == 2 and r["acc_std"] >= 0 for r in rows)
    lines = (tmp_path / "sweep_patch.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("config_id,patch_px,accuracy")
    assert (tmp_path / "sweep_patch.png").stat().st_size > 0
    with pytest.raises(ValueError):
        patch_size_sweep(ExperimentConfig(patch_sizes=(20,)), paintings)


def test_imf_sweep_skips_missing_modes(paintings, tmp_path):
    rows = imf_sweep(DESK, paintings, imf_indices=(1, 99), patch_sizes=(40,),
                     include_height=False, out_dir=tmp_path)
    assert [r["channel"] for r in rows] == ["imf:1", "imf:99"]
    assert not rows[0].get("skipped") and rows[1]["skipped"]
    assert len((tmp_path / "sweep_imf.csv").read_text().splitlines()) == 2


def test_cross_region_directions(paintings):
    bg, fg = RegionClass.BACKGROUND, RegionClass.FOREGROUND
    a = cross_region_point(DESK, paintings, 20, bg, fg, "height", 3)
    b = cross_region_point(DESK, paintings, 20, fg, bg, "height", 3)
    assert a.n_train != b.n_train and a.test_paintings == b.test_paintings
    c = cross_region_point(DESK, paintings, 20, bg, fg, "pseudo-color", 3)
    assert c.n_test == a.n_test


def test_painting_probabilities_cover_grid(paintings):
    from brushforge.experiments import fit_mle
    models = fit_mle(paintings, {p.artist_id: p.painting_id for p in paintings[::3]})
    p = paintings[0]
    probs, coords = painting_probabilities(p, models, 40, DESK)
    assert probs.shape == (len(coords), 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    img = render_attribution_map(p.normalized, probs, coords, 40)
    assert img.shape[:2] == p.normalized.shape


def test_write_rows_csv_stable(tmp_path, paintings):
    cfg = ExperimentConfig(patch_sizes=(20, 40), classifier="mle", trials=1,
                           detrend_radius_px=40)
    rows = patch_size_sweep(cfg, paintings)
    write_rows_csv(rows, tmp_path / "a.csv")
    write_rows_csv(rows + [{"skipped": True}], tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
