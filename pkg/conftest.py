import pytest

import tensor_autodiff as ta
import training_eval as te


@pytest.fixture
def rng():
    """Seeded Philox generator."""
    return ta.make_rng(1234)


@pytest.fixture(autouse=True)
def reset_precision():
    yield
    ta.set_default_dtype(ta.DEFAULT_PRECISION)
    ta.set_debug(False)


@pytest.fixture
def tiny_model_config():
    """Small enough that a full forward/backward pass takes milliseconds."""
    return te.ModelConfig(d_lat=8, conv_channels=4, attention_heads=2, d_h=8, block_count=2, d_k=16,
                          token_count=4, lora_rank=2, lora_alpha=4.0, lora_dropout=0.0,
                          surrogate_blocks=1, surrogate_heads=2, vocab_size=16, context_cap=32,
                          prompt_ids=(1, 5, 9, 3))


@pytest.fixture
def desk_model_config():
    """Matches configs/desk.toml."""
    return te.ModelConfig(d_lat=16, conv_channels=8, attention_heads=4, d_h=16, block_count=2, d_k=32,
                          token_count=8, lora_rank=4, lora_alpha=8.0, lora_dropout=0.1)


@pytest.fixture
def desk_train_config():
    return te.TrainConfig(learning_rate=3e-3, epochs=10, batch_size=8, accumulation_steps=1,
                          validation_fraction=0.1, seed=0)