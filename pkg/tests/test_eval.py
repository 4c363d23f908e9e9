import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from clipsep import data, dsp, evaluate, losses, querybank
from clipsep.errors import InvalidInputError, UsageError
from clipsep.model import SeparatorConfig, build_model

TINY = dict(k=4, unet_depth=2, base_channels=4)


def orthogonal_pair(rng, n=4000):
    s = rng.standard_normal(n)
    e = rng.standard_normal(n)
    e -= (e @ s) / (s @ s) * s
    return s, e


def test_sdr_closed_form():
    s, e = orthogonal_pair(np.random.default_rng(0))
    for ratio in (0.1, 1.0, 3.0):
        est = s + ratio * e
        expected = 10 * math.log10((s @ s) / (ratio**2 * (e @ e)))
        assert evaluate.sdr(s, est) == pytest.approx(expected, abs=1e-9)


def test_sdr_caps_and_errors():
    s = np.random.default_rng(1).standard_normal(100)
    assert evaluate.sdr(s, s) == 100.0
    assert evaluate.sdr(s, np.zeros(100)) == -100.0
    with pytest.raises(evaluate.UndefinedMetricError):
        evaluate.sdr(np.zeros(100), s)
    with pytest.raises(InvalidInputError):
        evaluate.sdr(s, s[:50])


@settings(max_examples=30, deadline=None)
@given(gain=st.floats(1e-3, 1e3), seed=st.integers(0, 2**16))
def test_sdr_ignores_positive_gain(gain, seed):
    rng = np.random.default_rng(seed)
    s, n = rng.standard_normal((2, 500))
    est = s + 0.5 * n
    assert evaluate.sdr(s, gain * est) == pytest.approx(evaluate.sdr(s, est), abs=1e-8)


def test_improvement_is_difference():
    s, e = orthogonal_pair(np.random.default_rng(2))
    mix, est = s + e, s + 0.1 * e
    assert evaluate.sdr_improvement(mix, s, est) == pytest.approx(20.0, abs=1e-9)


def test_stats_population_error():
    st_ = evaluate._stats([1.0, 2.0, 3.0, 10.0])
    assert st_["mean"] == 4.0 and st_["median"] == 2.5
    assert st_["std_error"] == pytest.approx(np.std([1, 2, 3, 10]) / 2)
    assert evaluate._stats([5.0])["std_error"] == 0.0
    with pytest.raises(InvalidInputError):
        evaluate._stats([])


def test_report_round_trip(tmp_path):
    rep = evaluate.EvalReport([3.0, 5.0], [0.0, 1.0], "clipsep", "text")
    rep.write(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["n"] == 2 and d["sdr_improvement"]["mean"] == 3.5
    assert evaluate.report_from_dict(d).sdr == rep.sdr
    table = (tmp_path / "r.txt").read_text()
    assert "Mixture" in table and "4.00 +- 0.71" in table


def test_pit_oracle_picks_matching_mask():
    rng = np.random.default_rng(3)
    t = np.arange(8192) / 16000
    a = np.sin(2 * np.pi * 440 * t)
    b = 0.3 * rng.standard_normal(8192)
    spec = dsp.stft(a + b)
    ideal = dsp.ground_truth_masks([np.abs(dsp.stft(a)), np.abs(dsp.stft(b))])
    est, idx = evaluate.pit_oracle_select([ideal[1], ideal[0]], spec, a)
    assert idx == 1
    assert evaluate.sdr(a, est) > evaluate.sdr(a, a + b)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    c = data.make_synthetic_corpus(data.CorpusSpec(classes=3, clips_per_class=5, seed=4, clip_seconds=0.5),
                                   tmp_path_factory.mktemp("c"))
    bank = querybank.load_bank(c.bank)
    return data.read_manifest(c.manifest, bank), bank


def _pairs(corpus, count=3):
    entries, bank = corpus
    return data.eval_pairing(entries, entries, count, seed=0, bank=bank, crop_len=4096)


@pytest.mark.parametrize("variant", ["clipsep", "clipsep_nit", "pit"])
def test_evaluate_model_report(corpus, variant, tmp_path):
    model = build_model(SeparatorConfig(variant=variant, **TINY))
    rep = evaluate.evaluate_model(model, _pairs(corpus, 1), "text", corpus[1], dump_dir=tmp_path)
    assert rep.n == 1 and np.isfinite(rep.sdr[0])
    assert (tmp_path / "pair_000.png").stat().st_size > 0
    if variant == "pit":
        assert rep.modality == "oracle" and rep.selected in ([0], [1])
    rep.write(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["variant"] == variant


def test_zero_gap_modalities_agree(corpus):
    model = build_model(SeparatorConfig(**TINY))
    pairs = _pairs(corpus)
    a = evaluate.evaluate_model(model, pairs, "image", corpus[1])
    b = evaluate.evaluate_model(model, pairs, "text", corpus[1])
    assert a.sdr == b.sdr


def test_label_queries(corpus):
    entries, bank = corpus
    model = build_model(SeparatorConfig(variant="labelsep", num_classes=3, **TINY))
    rep = evaluate.evaluate_model(model, _pairs(corpus, 2), "label", bank, data.class_index_for(entries))
    assert rep.modality == "label" and rep.n == 2
    with pytest.raises(UsageError):
        evaluate.evaluate_model(model, _pairs(corpus, 1), "label", bank)


def test_noise_activation_report(corpus):
    entries, bank = corpus
    val = data.sample_batch(entries, 3, 2, 0, 0, bank=bank, crop_len=4096)
    model = build_model(SeparatorConfig(variant="clipsep_nit", **TINY))
    got = evaluate.noise_activation_report(model, val)
    model.eval()
    with torch.no_grad():
        acts = []
        for ex in val:
            _, N = model.forward_nit(torch.tensor(ex.X[None], dtype=torch.float32),
                                     torch.tensor(ex.embeddings[None], dtype=torch.float32))
            acts.append(sum(N[0, i].mean().item() for i in range(2)))
    assert got == pytest.approx(np.mean(acts), rel=1e-5)
    assert 0 <= got <= 2
    with pytest.raises(UsageError):
        evaluate.noise_activation_report(build_model(SeparatorConfig(**TINY)), val)


def test_noise_activation_matches_loss_helper():
    N = torch.rand(3, 2, 4, 5)
    np.testing.assert_allclose(losses.noise_activation(N).numpy(), N.mean(dim=(2, 3)).sum(dim=1).numpy(), rtol=1e-6)
