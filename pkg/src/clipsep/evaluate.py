"""SDR evaluation and reporting."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data, dsp, losses
from .errors import InvalidInputError, UsageError
from .model import predict_masks, reconstruct, separate
from .querybank import QueryEmbedding

SDR_CAP = 100.0


class UndefinedMetricError(InvalidInputError):
    pass


def _samples(x):
    return x.samples if isinstance(x, dsp.AudioClip) else np.asarray(x, dtype=np.float64)


def sdr(reference, estimate):
    """Scale-projected SDR in dB, capped to +-100 dB.

    The estimate is projected onto the reference first, so any positive gain
    on the estimate leaves the value unchanged.
    """
    s, e = _samples(reference), _samples(estimate)
    if s.shape != e.shape:
        raise InvalidInputError(f"length mismatch: {s.shape} vs {e.shape}")
    ref_energy = float(s @ s)
    if ref_energy == 0.0:
        raise UndefinedMetricError("SDR undefined for an all-zero reference")
    target = (float(e @ s) / ref_energy) * s
    err = e - target
    t_energy, e_energy = float(target @ target), float(err @ err)
    if t_energy == 0.0:
        return -SDR_CAP
    if e_energy == 0.0:
        return SDR_CAP
    return float(np.clip(10.0 * math.log10(t_energy / e_energy), -SDR_CAP, SDR_CAP))


def sdr_improvement(mixture, reference, estimate):
    return sdr(reference, estimate) - sdr(reference, mixture)


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("no values to summarize")
    return {
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "std_error": float(v.std() / math.sqrt(v.size)),
    }


@dataclass
class EvalReport:
    sdr: list
    mixture_sdr: list
    variant: str
    modality: str
    selected: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.sdr)

    @property
    def sdri(self):
        return [a - b for a, b in zip(self.sdr, self.mixture_sdr)]

    @property
    def stats(self):
        return _stats(self.sdr)

    @property
    def mixture_stats(self):
        return _stats(self.mixture_sdr)

    @property
    def sdri_stats(self):
        return _stats(self.sdri)

    def to_dict(self):
        return {
            "variant": self.variant,
            "modality": self.modality,
            "n": self.n,
            "sdr": self.stats,
            "mixture_sdr": self.mixture_stats,
            "sdr_improvement": self.sdri_stats,
            "per_example": {"sdr": self.sdr, "mixture_sdr": self.mixture_sdr},
            "selected": self.selected,
        }

    def table(self):
        rows = [("Mixture", self.mixture_stats), (f"{self.variant} ({self.modality})", self.stats)]
        lines = [f"{'Model':<28}{'Mean SDR [dB]':>20}{'Median SDR [dB]':>18}"]
        for name, st in rows:
            mean = f"{st['mean']:.2f} +- {st['std_error']:.2f}"
            lines.append(f"{name:<28}{mean:>20}{st['median']:>18.2f}")
        lines.append(f"{'SDR improvement':<28}{self.sdri_stats['mean']:>20.2f}{self.sdri_stats['median']:>18.2f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        path.with_suffix(".txt").write_text(self.table(), encoding="utf-8")


def pit_oracle_select(masks, spec, reference):
    """Reconstruct every masked estimate and keep the best one against ``reference``.

    Evaluation-only: needs the ground-truth reference.  Returns (clip, index).
    """
    ref = _samples(reference)
    best, best_idx, best_score = None, -1, -np.inf
    for i, mask in enumerate(masks):
        est = reconstruct(spec, mask, ref.shape[0])
        score = sdr(ref, est)
        if score > best_score:
            best, best_idx, best_score = est, i, score
    return best, best_idx


def target_embedding(model, entry, modality, bank, class_index=None):
    if modality == "label":
        if model.label_table is None or class_index is None:
            raise UsageError("label queries need a labelsep model and a class index")
        with torch.no_grad():
            vec = model.label_table(class_index[entry.label]).double().numpy()
        return QueryEmbedding(vec, "label", entry.label)
    return data.query_embedding(bank, entry, modality)


def evaluate_model(model, pairs, modality="text", bank=None, class_index=None, dump_dir=None):
    """Separate the target of every eval pair and score it against the clean stem."""
    if not pairs:
        raise InvalidInputError("no evaluation pairs")
    scores, mix_scores, selected = [], [], []
    for k, ex in enumerate(pairs):
        ref = ex.sources[ex.target_index]
        mix = dsp.AudioClip(ex.mixture)
        if model.variant == "pit":
            masks = predict_masks(model, ex.X)
            est, idx = pit_oracle_select(masks, ex.spec, ref)
            selected.append(idx)
        else:
            emb = target_embedding(model, ex.entries[ex.target_index], modality, bank, class_index)
            est = separate(model, mix, emb)
        scores.append(sdr(ref, est))
        mix_scores.append(sdr(ref, mix))
        if dump_dir is not None:
            dump_spectrograms(Path(dump_dir) / f"pair_{k:03d}.png", ex, est, model)
    return EvalReport(scores, mix_scores, model.variant, modality if model.variant != "pit" else "oracle",
                      selected)


def noise_activation_report(model, val_set):
    """Mean over ``val_set`` of the total noise-head activation sum_i mean(N_i)."""
    if model.variant != "clipsep_nit":
        raise UsageError("noise activation needs a clipsep_nit model")
    if not val_set:
        raise InvalidInputError("validation set is empty")
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            X = torch.as_tensor(np.stack([ex.X for ex in val_set]), dtype=dtype)
            E = torch.as_tensor(np.stack([ex.embeddings for ex in val_set]), dtype=dtype)
            _, N = model.forward_nit(X, E)
    finally:
        model.train(was_training)
    return float(losses.noise_activation(N).mean())


def noise_activation_curve(checkpoints, val_set):
    """[(step, activation)] for a sequence of checkpoint paths."""
    from .checkpoint import load_model

    curve = []
    for path in checkpoints:
        model, header, _ = load_model(path)
        curve.append((header["meta"].get("step"), noise_activation_report(model, val_set)))
    return curve


def dump_spectrograms(path, example, estimate, model=None):
    """Mixture / target / estimate (and noise heads for NIT) log-magnitude panels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = [
        ("mixture", np.abs(example.spec)),
        ("target", np.abs(dsp.stft(example.sources[example.target_index]))),
        ("estimate", np.abs(dsp.stft(_samples(estimate)))),
    ]
    if model is not None and model.variant == "clipsep_nit" and example.embeddings is not None:
        dtype = next(model.parameters()).dtype
        model.eval()
        with torch.no_grad():
            X = torch.as_tensor(example.X, dtype=dtype)[None]
            E = torch.as_tensor(example.embeddings, dtype=dtype)[None]
            _, N = model.forward_nit(X, E)
        for i, m in enumerate(N[0].double().numpy()):
            panels.append((f"noise head {i + 1}", m * example.X))
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (title, grid) in zip(np.atleast_1d(axes), panels):
        ax.imshow(np.log1p(grid.T * 100), origin="lower", aspect="auto")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def report_from_dict(d):
    return EvalReport(d["per_example"]["sdr"], d["per_example"]["mixture_sdr"], d["variant"],
                      d["modality"], d.get("selected", []))

