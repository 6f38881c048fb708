"""The hybrid sequencing network.

Three pieces share one width-``d`` embedding space:

* a spectrum encoder: per-peak sinusoidal embeddings (m/z + normalized
  intensity) plus a precursor row (neutral-mass encoding + learned charge
  embedding), run through pre-norm self-attention blocks with no positional
  signal, so peak order cannot matter;
* an autoregressive (AT) decoder: token embeddings summed with sinusoidal
  encodings of the running prefix mass and the remaining suffix mass,
  causal self-attention, cross-attention to the encoder, feed-forward;
* a non-autoregressive (NAT) decoder: its only input is a learned position
  embedding table of length ``t_max`` (its signature admits no target
  tokens), unmasked self-attention, cross-attention, feed-forward, read out
  as frame-wise CTC logits over residues + blank.

After joint training the AT decoder can be fine-tuned with an augmented
cross-attention context: the NAT latents (gradient-blocked, plus a learned
segment embedding) concatenated with the encoder features (plus their own
segment embedding). Both segment vectors belong to the AT partition.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore
from .spectra import (
    WATER,
    AminoAcidTable,
    FloatEncoderConfig,
    Spectrum,
    embed_peak,
    encode_float,
)

__all__ = ["ModelConfig", "Model", "NATFeatures", "MAX_CHARGE", "prefix_suffix_masses"]

MAX_CHARGE = 10


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 2
    hidden: int = 128
    enc_layers: int = 2
    at_layers: int = 2
    nat_layers: int = 2
    t_max: int = 24
    # Wavelength bounds of the fixed sinusoidal encoders.
    mz_v_min: float = 0.001
    mz_v_max: float = 10000.0
    intensity_v_min: float = 1e-4
    intensity_v_max: float = 1.0
    paired_encoding: bool = False

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"model width must be positive and even, got {self.d}")
        if self.heads <= 0 or self.d % self.heads:
            raise ValueError(f"width {self.d} not divisible by heads {self.heads}")
        if min(self.hidden, self.enc_layers, self.at_layers, self.nat_layers, self.t_max) <= 0:
            raise ValueError("hidden, layer counts, and t_max must be positive")

    @property
    def mz_encoder(self) -> FloatEncoderConfig:
        return FloatEncoderConfig(self.d, self.mz_v_min, self.mz_v_max, self.paired_encoding)

    @property
    def intensity_encoder(self) -> FloatEncoderConfig:
        return FloatEncoderConfig(
            self.d, self.intensity_v_min, self.intensity_v_max, self.paired_encoding
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class NATFeatures(NamedTuple):
    """NAT decoder output: latents fed to cross-decoder attention, and logits."""

    latents: Tensor  # [t_max, d]
    logits: Tensor  # [t_max, nat_vocab]


def prefix_suffix_masses(
    residue_ids: Sequence[int], neutral_mass: float, table: AminoAcidTable
) -> np.ndarray:
    """Per-step (prefix, suffix) masses for the AT input sequence [BOS, a_1..a_n].

    Step t sees the prefix of residues emitted so far (zero at BOS) and the
    suffix budget ``neutral_mass - water - prefix``: what remains to reach
    the precursor. The suffix may go negative for a hypothesis that
    overshoots; the encoding accepts that.
    """
    masses = table.masses
    out = np.zeros((len(residue_ids) + 1, 2))
    prefix = 0.0
    budget = neutral_mass - WATER
    out[0] = (0.0, budget)
    for t, rid in enumerate(residue_ids, start=1):
        prefix += masses[rid]
        out[t] = (prefix, budget - prefix)
    return out


def _init(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=shape)


class Model:
    """Configuration + parameter store + forward passes."""

    def __init__(self, cfg: ModelConfig, table: AminoAcidTable, store: ParameterStore):
        self.cfg = cfg
        self.table = table
        self.store = store
        self.finetuned = False  # flips when stage-2 training has run

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def build(cls, cfg: ModelConfig, table: AminoAcidTable, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        d, hid = cfg.d, cfg.hidden

        def attn_block(partition: str, prefix: str) -> None:
            for name in ("wq", "wk", "wv", "wo"):
                store.add(partition, f"{prefix}.{name}", _init(rng, d, d))
            for name in ("bq", "bk", "bv", "bo"):
                store.add(partition, f"{prefix}.{name}", np.zeros(d))

        def ln(partition: str, prefix: str) -> None:
            store.add(partition, f"{prefix}.gain", np.ones(d))
            store.add(partition, f"{prefix}.bias", np.zeros(d))

        def ffn(partition: str, prefix: str) -> None:
            store.add(partition, f"{prefix}.w1", _init(rng, d, hid))
            store.add(partition, f"{prefix}.b1", np.zeros(hid))
            store.add(partition, f"{prefix}.w2", _init(rng, hid, d))
            store.add(partition, f"{prefix}.b2", np.zeros(d))

        store.add("enc", "charge_emb", _init(rng, MAX_CHARGE, d))
        for i in range(cfg.enc_layers):
            ln("enc", f"layer{i}.ln1")
            attn_block("enc", f"layer{i}.self")
            ln("enc", f"layer{i}.ln2")
            ffn("enc", f"layer{i}.ffn")
        ln("enc", "final_ln")

        store.add("at", "tok_emb", _init(rng, table.at_vocab_size, d))
        for i in range(cfg.at_layers):
            ln("at", f"layer{i}.ln1")
            attn_block("at", f"layer{i}.self")
            ln("at", f"layer{i}.ln2")
            attn_block("at", f"layer{i}.cross")
            ln("at", f"layer{i}.ln3")
            ffn("at", f"layer{i}.ffn")
        ln("at", "final_ln")
        store.add("at", "out.w", _init(rng, d, table.at_vocab_size))
        store.add("at", "out.b", np.zeros(table.at_vocab_size))
        store.add("at", "seg_nat", _init(rng, d))
        store.add("at", "seg_enc", _init(rng, d))

        store.add("nat", "pos_emb", _init(rng, cfg.t_max, d))
        for i in range(cfg.nat_layers):
            ln("nat", f"layer{i}.ln1")
            attn_block("nat", f"layer{i}.self")
            ln("nat", f"layer{i}.ln2")
            attn_block("nat", f"layer{i}.cross")
            ln("nat", f"layer{i}.ln3")
            ffn("nat", f"layer{i}.ffn")
        ln("nat", "final_ln")
        store.add("nat", "out.w", _init(rng, d, table.nat_vocab_size))
        store.add("nat", "out.b", np.zeros(table.nat_vocab_size))

        return cls(cfg, table, store)

    # ------------------------------------------------------------------
    # shared sublayers

    def _p(self, partition: str, name: str) -> Tensor:
        return self.store.get(partition, name)

    def _mha(
        self,
        partition: str,
        prefix: str,
        x: Tensor,
        context: Tensor,
        mask: np.ndarray | None,
    ) -> Tensor:
        q = ad.linear(x, self._p(partition, f"{prefix}.wq"), self._p(partition, f"{prefix}.bq"))
        k = ad.linear(context, self._p(partition, f"{prefix}.wk"), self._p(partition, f"{prefix}.bk"))
        v = ad.linear(context, self._p(partition, f"{prefix}.wv"), self._p(partition, f"{prefix}.bv"))
        dh = self.cfg.d // self.cfg.heads
        heads = [
            ad.scaled_dot_attention(
                q[:, h * dh : (h + 1) * dh],
                k[:, h * dh : (h + 1) * dh],
                v[:, h * dh : (h + 1) * dh],
                mask,
            )
            for h in range(self.cfg.heads)
        ]
        merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        return ad.linear(merged, self._p(partition, f"{prefix}.wo"), self._p(partition, f"{prefix}.bo"))

    def _ln(self, partition: str, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self._p(partition, f"{prefix}.gain"), self._p(partition, f"{prefix}.bias"))

    def _ffn(self, partition: str, prefix: str, x: Tensor) -> Tensor:
        h = ad.gelu(ad.linear(x, self._p(partition, f"{prefix}.w1"), self._p(partition, f"{prefix}.b1")))
        return ad.linear(h, self._p(partition, f"{prefix}.w2"), self._p(partition, f"{prefix}.b2"))

    # ------------------------------------------------------------------
    # encoder

    def spectrum_rows(self, spectrum: Spectrum) -> tuple[Tensor, np.ndarray]:
        """Input rows for the encoder: precursor row 0, then one row per peak.

        Returns (precursor_row [1, d] including the learned charge embedding,
        peak_rows [k, d] as plain float arrays).
        """
        if not 1 <= spectrum.charge <= MAX_CHARGE:
            raise ValueError(
                f"spectrum {spectrum.spectrum_id!r}: charge {spectrum.charge} outside "
                f"the supported range 1..{MAX_CHARGE}"
            )
        mz_cfg = self.cfg.mz_encoder
        int_cfg = self.cfg.intensity_encoder
        max_i = spectrum.max_intensity
        peak_rows = np.stack(
            [embed_peak(p, mz_cfg, int_cfg, max_i) for p in spectrum.peaks]
        )
        mass_row = ad.constant(encode_float(spectrum.neutral_mass, mz_cfg))
        charge_row = ad.gather(self._p("enc", "charge_emb"), [spectrum.charge - 1])
        return ad.add(charge_row, mass_row), peak_rows

    def run_encoder(self, rows: Tensor) -> Tensor:
        """Pre-norm self-attention stack over [k+1, d] rows; no positions."""
        x = rows
        for i in range(self.cfg.enc_layers):
            normed = self._ln("enc", f"layer{i}.ln1", x)
            x = ad.add(x, self._mha("enc", f"layer{i}.self", normed, normed, None))
            x = ad.add(x, self._ffn("enc", f"layer{i}.ffn", self._ln("enc", f"layer{i}.ln2", x)))
        return self._ln("enc", "final_ln", x)

    def encode_spectrum(self, spectrum: Spectrum) -> Tensor:
        precursor_row, peak_rows = self.spectrum_rows(spectrum)
        x = ad.concat([precursor_row, ad.constant(peak_rows)], axis=0)
        return self.run_encoder(x)

    # ------------------------------------------------------------------
    # NAT decoder

    def nat_forward(self, enc_features: Tensor) -> NATFeatures:
        x = self._p("nat", "pos_emb")
        for i in range(self.cfg.nat_layers):
            normed = self._ln("nat", f"layer{i}.ln1", x)
            x = ad.add(x, self._mha("nat", f"layer{i}.self", normed, normed, None))
            x = ad.add(
                x,
                self._mha("nat", f"layer{i}.cross", self._ln("nat", f"layer{i}.ln2", x), enc_features, None),
            )
            x = ad.add(x, self._ffn("nat", f"layer{i}.ffn", self._ln("nat", f"layer{i}.ln3", x)))
        latents = self._ln("nat", "final_ln", x)
        logits = ad.linear(latents, self._p("nat", "out.w"), self._p("nat", "out.b"))
        return NATFeatures(latents, logits)

    # ------------------------------------------------------------------
    # AT decoder

    def at_forward(
        self,
        tokens: Sequence[int],
        masses: np.ndarray,
        enc_features: Tensor,
        nat_latents: Tensor | None = None,
        block_nat_grad: bool = True,
    ) -> Tensor:
        """Next-token logits [len(tokens), at_vocab] for a [BOS, a_1, ...] input.

        ``masses`` holds one (prefix, suffix) pair per input position; both
        are embedded with the fixed m/z encoder and summed into the token
        embedding. With ``nat_latents`` the cross-attention context becomes
        [NAT latents + seg_nat ; encoder features + seg_enc]; gradient into
        the NAT latents is blocked unless ``block_nat_grad=False`` (the
        ablation switch).
        """
        tokens = list(tokens)
        masses = np.asarray(masses, dtype=np.float64)
        if masses.shape != (len(tokens), 2):
            raise ValueError(
                f"masses must be [{len(tokens)}, 2] (prefix, suffix) pairs, got {masses.shape}"
            )
        vocab = self.table.at_vocab_size
        if any(not 0 <= t < vocab for t in tokens):
            raise ValueError(f"token id outside AT vocabulary of size {vocab}")

        mz_cfg = self.cfg.mz_encoder
        mass_rows = np.stack(
            [encode_float(pm, mz_cfg) + encode_float(sm, mz_cfg) for pm, sm in masses]
        )
        x = ad.add(ad.gather(self._p("at", "tok_emb"), tokens), ad.constant(mass_rows))

        if nat_latents is None:
            context = enc_features
        else:
            nv = ad.stop_gradient(nat_latents) if block_nat_grad else nat_latents
            context = ad.concat(
                [
                    ad.add(nv, self._p("at", "seg_nat")),
                    ad.add(enc_features, self._p("at", "seg_enc")),
                ],
                axis=0,
            )

        causal = np.tril(np.ones((len(tokens), len(tokens)), dtype=bool))
        for i in range(self.cfg.at_layers):
            normed = self._ln("at", f"layer{i}.ln1", x)
            x = ad.add(x, self._mha("at", f"layer{i}.self", normed, normed, causal))
            x = ad.add(
                x,
                self._mha("at", f"layer{i}.cross", self._ln("at", f"layer{i}.ln2", x), context, None),
            )
            x = ad.add(x, self._ffn("at", f"layer{i}.ffn", self._ln("at", f"layer{i}.ln3", x)))
        x = self._ln("at", "final_ln", x)
        return ad.linear(x, self._p("at", "out.w"), self._p("at", "out.b"))

    # ------------------------------------------------------------------
    # persistence

    def metadata(self, extra: dict | None = None) -> dict:
        blob = {
            "model": self.cfg.to_dict(),
            "vocabulary": self.table.to_dict(),
            "finetuned": self.finetuned,
        }
        if extra:
            blob.update(extra)
        return blob

    @classmethod
    def from_checkpoint_blob(cls, store: ParameterStore, blob: dict) -> "Model":
        cfg = ModelConfig.from_dict(blob["model"])
        table = AminoAcidTable.from_dict(blob["vocabulary"])
        model = cls(cfg, table, store)
        model.finetuned = bool(blob.get("finetuned", False))
        return model
