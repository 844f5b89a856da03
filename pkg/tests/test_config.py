import pytest

from mono3d.config import TOY_PRESET, ConfigError, RunConfig, parse_pairs, toy_config


def test_defaults_mirror_full_scale_constants():
    cfg = RunConfig()
    assert cfg.lr == 1e-4 and cfg.score_thresh == 0.75 and cfg.nms_iou == 0.4
    assert cfg.crop_top == 100 and (cfg.input_h, cfg.input_w) == (288, 1280)
    assert (cfg.C, cfg.H, cfg.W, cfg.D) == (256, 36, 160, 96)


def test_toy_preset_dimensions():
    cfg = toy_config()
    assert (cfg.C, cfg.H, cfg.W, cfg.D, cfg.r) == (32, 12, 12, 24, 4)


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_text("seed=1\nlearning_rate=3\n")


@pytest.mark.parametrize("text", ["D=abc", "layer_norm=maybe", "ratios=", "novalue", "=3"])
def test_bad_values_are_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


@pytest.mark.parametrize("pairs", [{"D": "25"}, {"heads": "3"}, {"use_dfe": "false"}, {"attention": "sparse"}, {"eval_iou": "Car"}])
def test_inconsistent_configs_fail_validation(pairs):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(pairs).validate()


def test_dump_then_reload_is_identical():
    cfg = toy_config({"seed": "17", "ratios": "0.75,1.25", "layer_norm": "true", "lr": "0.0033"})
    assert RunConfig.from_text(cfg.dump()) == cfg


def test_comments_and_blank_lines_are_skipped():
    assert parse_pairs(["# note", "", "  seed = 4 "]) == {"seed": "4"}


def test_tuple_values_parse_by_element_type():
    cfg = RunConfig.from_text("ratios=0.5, 2\nclasses=Car,Van\nbench_sizes=64,128")
    assert cfg.ratios == (0.5, 2.0) and cfg.classes == ("Car", "Van") and cfg.bench_sizes == (64, 128)


def test_scales_grow_by_a_quarter_octave():
    cfg = RunConfig()
    s = cfg.scales()
    assert len(s) == cfg.scale_count and s[0] == cfg.scale_base
    assert abs(s[4] / s[0] - 2.0) < 1e-12


def test_toy_preset_only_names_real_keys():
    RunConfig().with_overrides(TOY_PRESET)
