"""Query-conditioned mask separator.

A spectrogram U-Net emits ``k`` intermediate masks.  Each source's query
embedding is projected to a k-vector that mixes those masks into one
sigmoid mask.  The noise-invariant variant adds ``n`` noise heads driven by
the sum of the query vectors; the PIT variant replaces queries by fixed
learned mixing vectors.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsp
from .errors import InvalidInputError, UsageError
from .querybank import EMBED_DIM, LabelTable, QueryEmbedding

VARIANTS = ("clipsep", "clipsep_nit", "pit", "labelsep")


def canonical_variant(name):
    name = name.replace("-", "_").lower()
    if name not in VARIANTS:
        raise InvalidInputError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return name


@dataclass
class SeparatorConfig:
    k: int = 32
    n: int = 2
    unet_depth: int = 7
    base_channels: int = 32
    variant: str = "clipsep"
    tie_heads: bool = True
    normalize_embeddings: bool = False
    num_classes: int = 0
    embed_dim: int = EMBED_DIM
    # diagnostic only: sum of k sigmoids instead of sigmoid of the sum
    literal_mask_sum: bool = False

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if not self.k >= self.n >= 1:
            raise InvalidInputError(f"need k >= n >= 1, got k={self.k}, n={self.n}")
        if self.unet_depth < 1:
            raise InvalidInputError("unet_depth must be >= 1")
        if self.base_channels < 1:
            raise InvalidInputError("base_channels must be >= 1")
        if self.num_classes < 0:
            raise InvalidInputError("num_classes must be >= 0 (0: taken from the corpus)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class UNet(nn.Module):
    """Stride-2 conv encoder / transposed-conv decoder with skip concatenation."""

    def __init__(self, out_channels, depth=7, base_channels=32):
        super().__init__()
        self.depth = depth
        chans = [base_channels * 2 ** min(i, 3) for i in range(depth)]
        self.input_norm = nn.BatchNorm2d(1)
        self.down = nn.ModuleList()
        for i in range(depth):
            c_in = 1 if i == 0 else chans[i - 1]
            inner = 0 < i < depth - 1
            layers = [nn.Conv2d(c_in, chans[i], 4, stride=2, padding=1, bias=not inner)]
            if inner:
                layers.append(nn.BatchNorm2d(chans[i]))
            layers.append(nn.LeakyReLU(0.2) if i < depth - 1 else nn.ReLU())
            self.down.append(nn.Sequential(*layers))
        self.up = nn.ModuleList()
        for i in range(depth):
            c_in = chans[i] if i == depth - 1 else 2 * chans[i]
            c_out = chans[i - 1] if i > 0 else base_channels
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(),
            ))
        self.head = nn.Conv2d(base_channels, out_channels, 1)

    def forward(self, x):
        # x: (B, 1, T, F)
        T, Fb = x.shape[-2:]
        x = self.input_norm(x)
        mult = 2 ** self.depth
        x = F.pad(x, (0, -Fb % mult, 0, -T % mult))
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        x = skips.pop()
        for i in reversed(range(self.depth)):
            x = self.up[i](x)
            if i > 0:
                x = torch.cat([x, skips[i - 1]], dim=1)
        return self.head(x)[..., :T, :Fb]


class ProjectionHead(nn.Module):
    """Linear map from an embedding to a k-vector, plus mask-mixing scale and bias."""

    def __init__(self, in_dim, k):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_dim, k))
        self.scale = nn.Parameter(torch.ones(k))
        self.bias = nn.Parameter(torch.zeros(()))
        nn.init.xavier_uniform_(self.weight)


NOISE_BIAS_INIT = -3.0


class NoiseHead(ProjectionHead):
    """Projection of the summed query vectors (k -> k).

    The bias starts negative so noise masks begin near zero: with both query
    and noise masks near 0.5, min(1, Q + N) saturates and the query heads get
    no gradient on target bins.
    """

    def __init__(self, k, bias_init=NOISE_BIAS_INIT):
        super().__init__(k, k)
        nn.init.constant_(self.bias, bias_init)


class PitHead(nn.Module):
    """Fixed learned mixing vector standing in for a query vector."""

    def __init__(self, k):
        super().__init__()
        self.query = nn.Parameter(torch.empty(k))
        self.scale = nn.Parameter(torch.ones(k))
        self.bias = nn.Parameter(torch.zeros(()))
        nn.init.uniform_(self.query, -1.0, 1.0)


def project_query(e, head):
    """q = e @ W for embeddings ``e`` of shape (..., in_dim)."""
    return e @ head.weight


def mix_masks(q, intermediates, head, literal=False):
    """sigmoid(sum_j w_j q_j M_j + b) for q (..., k) and intermediates (..., k, T, F).

    ``literal=True`` evaluates sum_j sigmoid(w_j q_j M_j + b) instead; that form
    is not bounded by 1 and is kept only for comparison.
    """
    coeff = head.scale * q
    if literal:
        terms = coeff[..., :, None, None] * intermediates + head.bias
        return torch.sigmoid(terms).sum(dim=-3)
    return torch.sigmoid(torch.einsum("...k,...ktf->...tf", coeff, intermediates) + head.bias)


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_uniform_(m.weight, a=0.2, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SeparatorModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        k, n = config.k, config.n
        self.unet = UNet(k, config.unet_depth, config.base_channels)
        _init_weights(self.unet)
        self.heads = nn.ModuleList()
        self.noise_heads = nn.ModuleList()
        self.pit_heads = nn.ModuleList()
        self.label_table = None
        if config.variant == "pit":
            self.pit_heads.extend(PitHead(k) for _ in range(n))
        else:
            n_heads = 1 if config.tie_heads else n
            self.heads.extend(ProjectionHead(config.embed_dim, k) for _ in range(n_heads))
        if config.variant == "clipsep_nit":
            self.noise_heads.extend(NoiseHead(k) for _ in range(n))
        if config.variant == "labelsep":
            if config.num_classes < 1:
                raise InvalidInputError("labelsep model needs num_classes >= 1")
            self.label_table = LabelTable(config.num_classes, config.embed_dim)

    @property
    def variant(self):
        return self.config.variant

    def _require(self, *variants):
        if self.variant not in variants:
            raise UsageError(f"operation needs variant in {variants}, model is {self.variant!r}")

    def head_for(self, slot):
        return self.heads[0 if self.config.tie_heads else slot]

    def unet_forward(self, X):
        """k raw intermediate masks (B, k, T, F) from linear magnitudes X (B, T, F)."""
        if not torch.all(torch.isfinite(X)):
            raise InvalidInputError("magnitude input contains non-finite values")
        return self.unet(torch.log1p(X).unsqueeze(1))

    def query_vectors(self, E):
        """(B, n, embed_dim) embeddings -> (B, n, k) query vectors."""
        if self.config.normalize_embeddings:
            E = F.normalize(E, dim=-1)
        return torch.stack(
            [project_query(E[:, i], self.head_for(i)) for i in range(E.shape[1])], dim=1
        )

    def _mix(self, inter, coeffs, biases):
        """Mix intermediates (B, k, T, F) with per-mask coefficients (B, m, k) -> (B, m, T, F)."""
        if self.config.literal_mask_sum:
            terms = coeffs[..., None, None] * inter.unsqueeze(1) + biases[:, None, None, None]
            return torch.sigmoid(terms).sum(dim=2)
        B, k, T, Fb = inter.shape
        logits = torch.bmm(coeffs, inter.reshape(B, k, T * Fb)).view(B, -1, T, Fb)
        return torch.sigmoid(logits + biases[:, None, None])

    def _query_terms(self, q):
        heads = [self.head_for(i) for i in range(q.shape[1])]
        coeffs = q * torch.stack([h.scale for h in heads])
        return coeffs, torch.stack([h.bias for h in heads])

    def forward_clipsep(self, X, E):
        self._require("clipsep", "labelsep")
        return self._forward_query(X, E)

    def _forward_query(self, X, E):
        inter = self.unet_forward(X)
        coeffs, biases = self._query_terms(self.query_vectors(E))
        return self._mix(inter, coeffs, biases)

    def forward_nit(self, X, E):
        """Returns (query masks, noise masks), each (B, n, T, F)."""
        self._require("clipsep_nit")
        inter = self.unet_forward(X)
        q = self.query_vectors(E)
        total = q.sum(dim=1)
        q_coeffs, q_bias = self._query_terms(q)
        n_coeffs = torch.stack([project_query(total, h) * h.scale for h in self.noise_heads], dim=1)
        n_bias = torch.stack([h.bias for h in self.noise_heads])
        masks = self._mix(inter, torch.cat([q_coeffs, n_coeffs], dim=1), torch.cat([q_bias, n_bias]))
        n = q.shape[1]
        return masks[:, :n], masks[:, n:]

    def forward_pit(self, X):
        self._require("pit")
        inter = self.unet_forward(X)
        coeffs = torch.stack([h.query * h.scale for h in self.pit_heads]).expand(inter.shape[0], -1, -1)
        return self._mix(inter, coeffs, torch.stack([h.bias for h in self.pit_heads]))

    def query_mask(self, X, E):
        """Query-head masks only, for any variant with query heads (noise heads dropped)."""
        if self.variant == "pit":
            raise UsageError("PIT model has no query heads; use pit_oracle_select")
        return self._forward_query(X, E)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def build_model(config, seed=0):
    """Construct a model whose initial parameters depend only on ``config`` and ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SeparatorModel(config)


def _embedding_tensor(embedding, dtype):
    vec = embedding.vector if isinstance(embedding, QueryEmbedding) else embedding
    return torch.as_tensor(np.asarray(vec), dtype=dtype).reshape(1, 1, -1)


def predict_masks(model, X, embedding=None):
    """Eval-mode masks for one mixture magnitude (T, F): (1, T, F) for queries, (n, T, F) for PIT."""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            Xt = torch.as_tensor(X, dtype=dtype).unsqueeze(0)
            if model.variant == "pit":
                masks = model.forward_pit(Xt)[0]
            else:
                if embedding is None:
                    raise InvalidInputError("query embedding required")
                masks = model.query_mask(Xt, _embedding_tensor(embedding, dtype))[0]
    finally:
        model.train(was_training)
    return masks.double().numpy()


def separate(model, clip, embedding, mask_override=None):
    """Extract the queried source from ``clip``.

    The raw (real-valued) query mask scales the mixture magnitude, the mixture
    phase is kept and the result is inverted back to a waveform of the same
    length.  ``mask_override`` replaces the predicted mask (``"ones"`` or a
    (T, F) array) for diagnostics and oracle runs.
    """
    spec = dsp.stft(clip)
    if mask_override is None:
        mask = predict_masks(model, np.abs(spec), embedding)[0]
    elif isinstance(mask_override, str) and mask_override == "ones":
        mask = np.ones(spec.shape)
    else:
        mask = np.asarray(mask_override, dtype=np.float64)
    return dsp.istft(dsp.apply_mask(spec, mask), len(clip))


def reconstruct(spec, mask, length):
    return dsp.istft(dsp.apply_mask(spec, mask), length)

