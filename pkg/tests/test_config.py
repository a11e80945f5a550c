import pytest

from dlf.config import (
    LAMBDA_GRID,
    ConfigError,
    DatasetSpec,
    ModelConfig,
    TrainConfig,
    dump_effective_config,
    model_config_hash,
    parse_config_text,
)


class TestParsing:
    def test_basic(self):
        text = """
        # stage-1 run
        stage = 1
        steps = 100
        init_checkpoint = runs/s0/checkpoint.pt
        model.embed_dim = 64
        data.root = synthetic:50:256
        data.seed = 3
        """
        train, model, data = parse_config_text(text)
        assert train.stage == 1 and train.steps == 100
        assert model.embed_dim == 64
        assert data.root == "synthetic:50:256" and data.seed == 3

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="bogus_key"):
            parse_config_text("bogus_key = 1")
        with pytest.raises(ConfigError, match="model.bogus"):
            parse_config_text("model.bogus = 1")

    def test_format_constants_locked(self):
        with pytest.raises(ConfigError, match="model.patch"):
            parse_config_text("model.patch = 8")

    def test_type_errors_named(self):
        with pytest.raises(ConfigError, match="steps"):
            parse_config_text("steps = abc")

    def test_bool_and_none(self):
        train, _, _ = parse_config_text("stage = 0\nadversarial = true\nlr = none")
        assert train.adversarial is True and train.lr is None

    def test_variant_propagates_to_model(self):
        train, model, _ = parse_config_text("stage = 0\nvariant = no_detail")
        assert model.variant == "no_detail"

    def test_variant_conflict(self):
        with pytest.raises(ConfigError, match="variant"):
            parse_config_text("variant = no_detail\nmodel.variant = full")

    def test_stage2_needs_lambda(self):
        with pytest.raises(ConfigError):
            parse_config_text("stage = 2\ninit_checkpoint = x.pt")

    def test_split_tuple(self):
        _, _, data = parse_config_text("data.split = 0.6, 0.2, 0.2")
        assert data.split == (0.6, 0.2, 0.2)

    def test_effective_dump_round_trips(self):
        train, model, data = parse_config_text("stage = 0\nsteps = 7")
        dump = dump_effective_config(train, model, data)
        assert "steps=7" in dump
        assert "effective_lr=0.001" in dump
        assert f"model.embed_dim={model.embed_dim}" in dump


class TestValidation:
    def test_crop_multiple_of_16(self):
        with pytest.raises(ConfigError):
            TrainConfig(crop_size=100)

    def test_stage_range(self):
        with pytest.raises(ConfigError):
            TrainConfig(stage=3)

    def test_variant_names(self):
        with pytest.raises(ConfigError):
            TrainConfig(variant="bogus")
        with pytest.raises(ConfigError):
            ModelConfig(variant="bogus")

    def test_lambda_grid(self):
        assert LAMBDA_GRID == (5.8, 8.5, 16.0, 28.0)

    def test_stage_default_lrs(self):
        assert TrainConfig(stage=0).effective_lr == 1e-3
        assert TrainConfig(stage=1, init_checkpoint="x").effective_lr == 4e-5
        assert TrainConfig(stage=2, lam=5.8, init_checkpoint="x").effective_lr == 2e-5

    def test_config_hash_stable_and_sensitive(self):
        a = ModelConfig()
        b = ModelConfig()
        c = ModelConfig(embed_dim=64)
        assert model_config_hash(a) == model_config_hash(b)
        assert model_config_hash(a) != model_config_hash(c)
