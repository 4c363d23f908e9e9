import copy
import json

import numpy as np
import pytest
import torch

from clipsep import data, querybank, train
from clipsep.checkpoint import load_model, read_container
from clipsep.errors import InvalidInputError, NumericError
from clipsep.model import SeparatorConfig

TINY_MODEL = dict(k=4, unet_depth=2, base_channels=4)


def tiny(variant="clipsep", steps=6, **kw):
    cfg = dict(steps=steps, batch_size=2, lr_warmup_steps=2, lr_decay_end=steps, validate_every=3,
               variant=variant, crop_len=2048, val_size=4)
    cfg.update(kw)
    return train.TrainConfig(**cfg), SeparatorConfig(variant=variant, **TINY_MODEL)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    c = data.make_synthetic_corpus(data.CorpusSpec(classes=3, clips_per_class=6, seed=2, clip_seconds=0.5),
                                   tmp_path_factory.mktemp("c"))
    bank = querybank.load_bank(c.bank)
    return data.read_manifest(c.manifest, bank), bank


def test_lr_schedule_points():
    cfg = train.TrainConfig()
    assert train.lr_at(0, cfg) == 0.0
    assert train.lr_at(5000, cfg) == 1e-3
    assert train.lr_at(100000, cfg) == 1e-4
    assert train.lr_at(200000, cfg) == 1e-4
    assert train.lr_at(2500, cfg) == pytest.approx(5e-4)
    assert train.lr_at(52500, cfg) == pytest.approx(5.5e-4)
    with pytest.raises(InvalidInputError):
        train.lr_at(-1, cfg)


def test_lr_schedule_is_monotone_pieces():
    cfg = train.TrainConfig()
    up = [train.lr_at(s, cfg) for s in range(0, 5001, 250)]
    down = [train.lr_at(s, cfg) for s in range(5000, 100001, 2500)]
    assert np.all(np.diff(up) > 0) and np.all(np.diff(down) < 0)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        train.TrainConfig(steps=10)  # decay end beyond the run
    with pytest.raises(InvalidInputError):
        train.TrainConfig(query_modality="audio")
    tc, mc = train.desk_configs("clipsep-nit", steps=400, gamma=0.1, k=8)
    assert (tc.variant, tc.gamma, tc.lr_decay_end, tc.lr_warmup_steps) == ("clipsep_nit", 0.1, 400, 20)
    assert (mc.k, mc.unet_depth, mc.variant) == (8, 5, "clipsep_nit")


def test_hybrid_alternates():
    cfg = train.TrainConfig(query_modality="hybrid")
    assert [train.modality_for(s, cfg) for s in range(4)] == ["image", "text", "image", "text"]


def _batch(corpus, step=0, n=2):
    entries, bank = corpus
    return data.sample_batch(data.split_entries(entries, "train"), 2, n, 0, step, bank=bank, crop_len=2048)


def test_clipping_rescales_without_turning(corpus):
    tc, mc = tiny()
    state = train.init_state(tc, mc)
    batch = _batch(corpus)
    for ex in batch:
        ex.X = ex.X * 1e5  # heavier loss weights push the gradient norm past 1
    shadow = copy.deepcopy(state.model)
    X, M, E = train.collate(batch, shadow)
    train.compute_loss(shadow, X, M, E, train.loss_config(tc))[0].total.backward()
    raw = torch.cat([p.grad.reshape(-1) for p in shadow.parameters()])

    state, _, record = train.train_step(state, batch, tc)
    clipped = torch.cat([p.grad.reshape(-1) for p in state.model.parameters()])
    assert record["grad_norm"] == pytest.approx(raw.norm().item(), rel=1e-6)
    assert raw.norm() > 1.0
    assert clipped.norm().item() == pytest.approx(1.0, abs=1e-6)
    cos = torch.dot(raw, clipped) / (raw.norm() * clipped.norm())
    assert cos.item() == pytest.approx(1.0, abs=1e-6)


def test_step_record_fields(corpus):
    tc, mc = tiny("clipsep_nit")
    state = train.init_state(tc, mc)
    state, breakdown, record = train.train_step(state, _batch(corpus), tc)
    assert set(record) == {"step", "lr", "grad_norm", "total", "nit", "reg", "chosen_permutation"}
    assert record["step"] == 0 and state.step == 1 and record["lr"] == 0.0
    assert record["total"] == pytest.approx(record["nit"] + 0.1 * record["reg"])


def test_non_finite_loss_aborts_with_clip_ids(corpus):
    tc, mc = tiny()
    state = train.init_state(tc, mc)
    with torch.no_grad():
        state.model.heads[0].bias.fill_(float("nan"))
    batch = _batch(corpus)
    with pytest.raises(NumericError) as exc:
        train.train_step(state, batch, tc)
    assert batch[0].entries[0].clip_id in str(exc.value)


@pytest.mark.parametrize("variant", ["clipsep", "clipsep_nit", "pit", "labelsep"])
def test_every_variant_trains(corpus, tmp_path, variant):
    entries, bank = corpus
    tc, mc = tiny(variant, steps=4, validate_every=2)
    state = train.fit(tc, mc, entries, bank, tmp_path)
    assert state.step == 4
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1, 2, 3]
    val = [json.loads(l) for l in (tmp_path / "val_log.jsonl").read_text().splitlines()]
    assert [v["step"] for v in val] == [2, 4]
    assert ("total_noise_activation" in val[0]) == (variant == "clipsep_nit")
    for name in ("last.ckpt", "best.ckpt", "step_0000002.ckpt", "config.json"):
        assert (tmp_path / name).exists()
    model, header, _ = load_model(tmp_path / "last.ckpt")
    assert model.variant == variant and header["meta"]["step"] == 4


def test_rerun_is_bitwise_identical(corpus, tmp_path):
    entries, bank = corpus
    tc, mc = tiny("clipsep_nit")
    train.fit(tc, mc, entries, bank, tmp_path / "a")
    train.fit(tc, mc, entries, bank, tmp_path / "b")
    for name in ("last.ckpt", "train_log.jsonl", "val_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(corpus, tmp_path):
    entries, bank = corpus
    tc, mc = tiny("clipsep_nit")
    full = train.fit(tc, mc, entries, bank, tmp_path / "full")
    train.fit(tc, mc, entries, bank, tmp_path / "part", stop_at=3)
    assert not (tmp_path / "part" / "step_0000006.ckpt").exists()
    resumed = train.fit(tc, mc, entries, bank, tmp_path / "part",
                        resume=tmp_path / "part" / "step_0000003.ckpt")
    assert train.parameter_hash(resumed.model) == train.parameter_hash(full.model)
    for name in ("last.ckpt", "train_log.jsonl", "val_log.jsonl"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()
    _, tensors = read_container(tmp_path / "full" / "last.ckpt")
    assert any(k.startswith("optim/") for k in tensors)
