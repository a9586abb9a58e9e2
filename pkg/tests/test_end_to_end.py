"""Full synthetic fine-tuning runs. Slow: deselect with `-m "not slow"`."""

import pytest

from config import DESK_SPLIT, EMBED_DIM, HIDDEN, SYNTH_AUDIO_DIM, SYNTH_ITEMS, SYNTH_TEXT_DIM
from dataset import generate_synthetic, split_train_val_test
from losses import LOSS_PRESETS
from metrics import ScorePairSeries, score_mse, srcc
from model import embed, init_model
from scoring import clap_scores
from trainer import TrainConfig, train

pytestmark = pytest.mark.slow

SEED = 1


@pytest.fixture(scope="module")
def splits():
    records = generate_synthetic(SYNTH_ITEMS, SYNTH_TEXT_DIM, SYNTH_AUDIO_DIM, noise_sigma=1.0, seed=SEED)
    return split_train_val_test(records, *DESK_SPLIT, seed=SEED)


def _fresh_model():
    return init_model(SYNTH_TEXT_DIM, SYNTH_AUDIO_DIM, EMBED_DIM, HIDDEN, seed=SEED)


def _held_out_series(model, records):
    emb = embed(model, [r.text_features for r in records], [r.audio_features for r in records])
    return ScorePairSeries.from_records(records, clap_scores(emb.audio, emb.text))


def test_fine_tuning_raises_held_out_srcc(splits):
    train_set, val_set, test_set = splits
    untrained = _fresh_model()
    cfg = TrainConfig.from_preset("wsce+mae", seed=SEED)
    assert (cfg.epochs, cfg.batch_size, cfg.lambda1, cfg.lambda2) == (50, 8, 0.1, 1.0)

    trained, report = train(untrained, train_set, val_set, cfg)
    before = srcc(_held_out_series(untrained, test_set))
    after = srcc(_held_out_series(trained, test_set))
    assert after >= before + 0.10, f"untrained {before:.3f}, trained {after:.3f}"
    assert report.best_val_loss < report.initial_val_loss


def test_regression_terms_beat_contrastive_only_on_mse(splits):
    train_set, val_set, test_set = splits
    mse = {}
    for preset in LOSS_PRESETS:
        cfg = TrainConfig.from_preset(preset, seed=SEED)
        trained, _ = train(_fresh_model(), train_set, val_set, cfg)
        mse[preset] = score_mse(_held_out_series(trained, test_set))
    for preset in ("wsce+mse", "wsce+mae", "mse", "mae"):
        assert mse[preset] <= mse["wsce"], mse
