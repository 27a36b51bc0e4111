import math
import warnings

import pytest

from conftest import TINY
from roomdistill.config import DEFAULTS
from roomdistill.config import PipelineConfig
from roomdistill.config import parse_text
from roomdistill.exceptions import ConfigInvalid
from roomdistill.providers.oracle import DEFAULT_PALETTE


def invalid(**overrides):
    with pytest.raises(ConfigInvalid) as excinfo:
        PipelineConfig.from_mapping({**TINY, **overrides})
    return "\n".join(excinfo.value.errors)


def test_defaults_are_valid():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        config = PipelineConfig.from_mapping()
    assert config.seed == 0
    assert config.run.stages == (1, 2, 3)
    assert config.run.pose_transform
    assert config.room.palette == DEFAULT_PALETTE
    assert config.prior.providers == (("oracle", 1.0), ("caa", 0.1))
    assert config.stage(2).t_max_schedule == (0.7, 0.4)
    assert config.stage(2).schedule_split == pytest.approx(2.0 / 3.0)
    assert config.stage(3).position_radius == 0.7
    assert config.render.intrinsics().half_fov == pytest.approx(math.pi / 4)
    assert not config.sds.wall_clock
    assert config.field.density_bias == -4.0
    assert config.field.shell_bias == 8.0


def test_far_defaults_to_room_diagonal(tiny_config):
    assert tiny_config.far == pytest.approx(4.0 * math.sqrt(3.0))
    assert tiny_config.replace({"render.far": 3.0}).far == 3.0


def test_ray_sampling(tiny_config):
    sampling = tiny_config.ray_sampling(seed=9)
    assert sampling.n_samples == 16
    assert sampling.stratified
    assert sampling.seed == 9
    assert sampling.background == (0.5, 0.5, 0.5)
    assert not tiny_config.ray_sampling(stratified=False).stratified


def test_text_round_trip(tiny_config):
    text = tiny_config.to_text()
    again = PipelineConfig.from_text(text)
    assert again == tiny_config
    assert again.to_text() == text
    assert text.splitlines() == sorted(text.splitlines())
    assert "render.stratified=true\n" in text
    assert "field.init_scale=0.0001\n" in text


def test_from_file(config_file):
    config = PipelineConfig.from_file(config_file(seed=11))
    assert config.seed == 11
    assert config.render.width == 16


def test_parse_text_skips_comments_and_blanks():
    values = parse_text("# a comment\n\n seed = 4 \nrender.width=32\n")
    assert values == {"seed": "4", "render.width": "32"}


def test_parse_text_reports_bad_lines():
    with pytest.raises(ConfigInvalid) as excinfo:
        parse_text("seed=1\nnot a pair\nseed=2\n")
    assert excinfo.value.errors == [
        "line 2: expected key=value, got 'not a pair'",
        "line 3: seed is set twice",
    ]
    assert str(excinfo.value).startswith("invalid configuration:")


def test_values_are_coerced():
    config = PipelineConfig.from_text("seed=7\nrender.stratified=no\nrender.near=0.1\n")
    assert config.seed == 7
    assert config.render.stratified is False
    assert config.render.near == 0.1


def test_unknown_key():
    assert "render.colour: unknown configuration key" in invalid(**{"render.colour": 1})


@pytest.mark.parametrize(
    "key, value, message",
    [
        ("render.near", "close", "expected a number"),
        ("seed", "1.5", "expected an integer"),
        ("render.stratified", "maybe", "expected a boolean"),
        ("optim.lr_grid", "inf", "expected a finite number"),
    ],
)
def test_bad_values(key, value, message):
    assert message in invalid(**{key: value})


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"stage1.t_min_start": 0.99}, "must be below stage1.t_max_start"),
        ({"stage3.position_radius": 2.5}, "must be below room.half_extent"),
        ({"run.stages": "21"}, "stages must run in order"),
        ({"run.stages": "2"}, "stages must run in order"),
        ({"stage1.position_radius": 0.5}, "stage1.position_radius must be 0"),
        ({"stage2.min_radius": 0.5}, "stage2.min_radius=0.5 must lie between"),
        (
            {"stage3.views_per_iteration": 1},
            "stage3.views_per_iteration must be at least 2",
        ),
        (
            {"field.levels": 8, "field.max_resolution": 5},
            "do not give strictly increasing grids",
        ),
        ({"render.n_samples": 1}, "render.n_samples must be at least 2"),
        ({"render.near": 7.0}, "render.near=7.0 must be positive and below"),
        ({"prior.providers": "oracle:1.0,nosuch:1.0"}, "'nosuch' cannot be found"),
        ({"prior.negative": "nosuch.Provider"}, "cannot be found"),
        ({"render.width": 18}, "must be a multiple of prior.caa_grid=4"),
        ({"prior.caa_weights": "random"}, "prior.caa_weights must be one of"),
        ({"pose.depth_cache": "redis"}, "pose.depth_cache must be one of"),
        ({"sds.weighting": "linear"}, "sds.weighting must be one of"),
        ({"room.palette": "1,0,0;0,1,0"}, "needs six wall colors"),
        ({"prior.providers": "oracle:heavy"}, "weight of 'oracle' is not a number"),
    ],
)
def test_validation_errors(overrides, message):
    assert message in invalid(**overrides)


def test_caa_grid_only_checked_with_caa():
    config = PipelineConfig.from_mapping(
        {**TINY, "render.width": 18, "prior.providers": "oracle:1.0"}
    )
    assert config.render.width == 18


def test_unknown_keys_are_reported_before_validation():
    with pytest.raises(ConfigInvalid) as excinfo:
        PipelineConfig.from_mapping({**TINY, "render.n_samples": 1, "bogus": 1})
    assert excinfo.value.errors == ["bogus: unknown configuration key"]


def test_validation_collects_every_error():
    with pytest.raises(ConfigInvalid) as excinfo:
        PipelineConfig.from_mapping(
            {**TINY, "render.n_samples": 1, "sds.weighting": "linear"}
        )
    assert len(excinfo.value.errors) == 2


def test_zero_weights_warn():
    with pytest.warns(UserWarning, match="every provider weight is zero"):
        PipelineConfig.from_mapping({**TINY, "prior.providers": "oracle:0,caa:0"})


def test_guidance_without_negative_warns():
    with pytest.warns(UserWarning, match="no prior.negative"):
        PipelineConfig.from_mapping({**TINY, "prior.guidance_scale": 7.5})


def test_prompt_tags(tiny_config):
    config = tiny_config.replace(
        {"prior.prompt": "bedroom, warm light, ", "prior.negative_prompt": ""}
    )
    assert config.prior.prompt_meta == ("bedroom", "warm light")
    assert config.prior.negative_prompt_meta == ()


def test_replace_revalidates(tiny_config):
    assert tiny_config.replace({"seed": 9}).seed == 9
    with pytest.raises(ConfigInvalid):
        tiny_config.replace({"render.n_samples": 0})


def test_stage_configs(tiny_config):
    for stage_id in (1, 2, 3):
        assert tiny_config.stage(stage_id).stage_id == stage_id
    assert tiny_config.stage(1).pitch_range == pytest.approx(math.radians(15.0))
    assert set(DEFAULTS) >= {f"stage{s}.iterations" for s in (1, 2, 3)}
