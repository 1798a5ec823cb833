import pytest

from ebad.config import ConfigError, load_config


FULL = """
data:
  root: data
  category: stripes
  channels: 1
  image_size: 32
topology: auto
trainer:
  learning_rate: 2.0e-4
  optimizer: sgd
  batch_size: 4
  epochs: 2
  seed: 11
sampler:
  step_size: 0.02
  noise_scale: null
  n_steps: 50
  init: {low: 0.0, high: 1.0}
  clamp: {enabled: true, low: 0.0, high: 1.0}
  buffer: {enabled: false, capacity: 256, reinit_prob: 0.1}
scoring:
  r: 1
  sigma_floor: 1.0e-6
eval:
  histogram_bins: 30
synth:
  seed: 3
  image_size: 32
  train_count: 10
  test_good_count: 5
  test_defect_count: 5
"""


def write(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    return path


def test_full_config(tmp_path):
    cfg = load_config(write(tmp_path, FULL))
    assert cfg.data.category == "stripes"
    assert cfg.trainer.optimizer == "sgd"
    assert cfg.trainer.seed == 11
    assert cfg.trainer.sampler.n_steps == 50
    assert cfg.trainer.sampler.resolved_noise_scale == pytest.approx(0.02 ** 0.5)
    assert cfg.scoring.r == 1
    assert cfg.evaluation.histogram_bins == 30
    assert cfg.synth.seed == 3
    assert cfg.topology().spatial_trace(32) == [32, 32, 16, 8, 4, 1]


def test_defaults_from_empty_config(tmp_path):
    cfg = load_config(write(tmp_path, "{}"))
    assert cfg.trainer.sampler.n_steps == 100
    assert cfg.scoring.r == 2
    assert cfg.synth is None


def test_seed_override(tmp_path):
    cfg = load_config(write(tmp_path, FULL), seed_override=99)
    assert cfg.trainer.seed == 99
    assert cfg.synth.seed == 99


def test_unknown_top_level_key(tmp_path):
    with pytest.raises(ConfigError, match="unknown top-level"):
        load_config(write(tmp_path, "daat: {}"))


def test_unknown_section_key(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(write(tmp_path, "trainer: {learning_rat: 0.1}"))


def test_unknown_sampler_key(tmp_path):
    with pytest.raises(ConfigError, match="sampler"):
        load_config(write(tmp_path, "sampler: {step_sizes: 0.1}"))


def test_clamp_shorthand(tmp_path):
    cfg = load_config(write(tmp_path, "sampler: {clamp: false}"))
    assert cfg.trainer.sampler.clamp_enabled is False


def test_invalid_value_reported(tmp_path):
    with pytest.raises(ConfigError, match="sampler"):
        load_config(write(tmp_path, "sampler: {step_size: -1.0}"))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_explicit_topology(tmp_path):
    cfg = load_config(write(tmp_path, "topology: reduced-64\ndata: {channels: 3, image_size: 64}"))
    assert cfg.topology().spatial_trace(64) == [64, 64, 32, 16, 8, 4, 1]


def test_bad_topology_name(tmp_path):
    with pytest.raises(ConfigError, match="topology"):
        load_config(write(tmp_path, "topology: huge"))
