"""Attack-propagation scenario: with shared feature directions an attack on
one attribute leaks into its neighbor; clean presets stay isolated."""

import numpy as np
import pytest

from npcircuit import attacks as atk
from npcircuit import datagen as dg
from npcircuit import metrics as mx
from npcircuit import recognizer as rec


def train_preset(name, n=6000, epochs=25, seed=21):
    spec = dg.presets()[name]
    train = dg.generate(spec, n, seed=seed)
    test = dg.generate(spec, 600, seed=seed + 1)
    cfg = rec.TrainConfig(epochs=epochs, batch_size=256, learning_rate=0.05, seed=1)
    params = rec.train(
        (train.x, train.attributes), spec.schema, cfg, input_slices=spec.recognizer_slices()
    )
    return spec, test, params


def attack_drops(spec, test, params, attacked=(1,)):
    cfg = atk.AttackConfig(norm="linf", bound=0.11, steps=50, attacked=attacked, seed=31)
    adv_x, _ = atk.pgd_batch(params, test.x, test.attributes, cfg)
    before = mx.attribute_accuracy(rec.attribute_argmax(params, test.x), test.attributes)
    after = mx.attribute_accuracy(rec.attribute_argmax(params, adv_x), test.attributes)
    return before - after


@pytest.mark.slow
class TestPropagation:
    def test_clean_preset_keeps_attacks_local(self):
        spec, test, params = train_preset("mnist-add3-like")
        drops = attack_drops(spec, test, params)
        assert drops[0] > 0.85  # the attacked attribute collapses
        assert np.all(drops[1:] < 0.05)  # the others stay intact

    def test_correlated_preset_propagates(self):
        spec, test, params = train_preset("correlated", n=8000)
        drops = attack_drops(spec, test, params)
        assert drops[0] > 0.85
        # shared feature directions: the paired attribute loses >= 30 points
        assert drops[1] >= 0.30
        # the attribute outside the shared window stays intact
        assert drops[2] < 0.05
