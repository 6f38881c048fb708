"""Decoders: CTC collapse, greedy and beam autoregressive search, and
precursor-mass-constrained (PMC) best-path decoding of the CTC frames.

The PMC decoder maximizes path probability over all frame paths whose
collapsed peptide's discretized residue-mass sum lands inside a window
around the discretized precursor target. Its state is (frames consumed,
accumulated discretized mass, last non-blank token); a blank frame keeps
the last non-blank token, so a repeat separated only by blanks still
counts as a stutter of the same residue rather than a new one. The
exhaustive-enumeration oracle below implements exactly the same collapse
semantics, which is what the dynamic program is checked against.

Ties in path probability are broken toward the lexicographically smaller
peptide (by residue symbol), both inside the DP and at the final window
selection. Within one DP cell all tied candidates share the same
discretized mass, and since every residue occupies at least one bin no
candidate can be a strict prefix of another; plain lexicographic order is
therefore stable under appending a common suffix, which is what makes the
in-cell tie-break sound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .network import Model, prefix_suffix_masses
from .spectra import WATER, AminoAcidTable, Peptide, Spectrum

__all__ = [
    "ctc_collapse",
    "DecodeResult",
    "greedy_at_decode",
    "beam_search_at",
    "PMCConfig",
    "PMCResult",
    "pmc_decode",
    "pmc_bruteforce_oracle",
    "nat_pmc_decode",
]


def ctc_collapse(path: Sequence[int], blank_id: int) -> list[int]:
    """Merge adjacent equal tokens, then drop blanks."""
    out: list[int] = []
    prev: int | None = None
    for y in path:
        if y != prev and y != blank_id:
            out.append(int(y))
        prev = int(y)
    return out


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# autoregressive decoding


@dataclass(frozen=True)
class DecodeResult:
    peptide: Peptide
    confidence: float  # mean per-token log-probability (EOS included)
    total_logp: float
    finished: bool  # False when the length cap cut the hypothesis off


def _next_logps(model: Model, spectrum: Spectrum, ids: list[int],
                enc, nat_latents) -> np.ndarray:
    """Masked next-token log-probabilities after the residues in ``ids``."""
    table = model.table
    tokens = [table.bos_id] + ids
    masses = prefix_suffix_masses(ids, spectrum.neutral_mass, table)
    logits = model.at_forward(tokens, masses, enc, nat_latents).values[-1]
    logps = _log_softmax_np(logits).copy()
    # Structural tokens are never valid emissions.
    logps[table.bos_id] = -np.inf
    logps[table.pad_id] = -np.inf
    return logps


def _decode_context(model: Model, spectrum: Spectrum):
    enc = model.encode_spectrum(spectrum)
    nat_latents = model.nat_forward(enc).latents if model.finetuned else None
    return enc, nat_latents


def greedy_at_decode(model: Model, spectrum: Spectrum, max_len: int) -> DecodeResult:
    """Argmax decoding, one full forward per emitted token (no state cache)."""
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")
    table = model.table
    enc, nat_latents = _decode_context(model, spectrum)
    ids: list[int] = []
    logps: list[float] = []
    finished = False
    while True:
        step_logps = _next_logps(model, spectrum, ids, enc, nat_latents)
        choice = int(np.argmax(step_logps))
        logps.append(float(step_logps[choice]))
        if choice == table.eos_id:
            finished = True
            break
        ids.append(choice)
        if len(ids) == max_len:
            break
    total = float(sum(logps)) if finished else float(sum(logps[: len(ids)]))
    n_emitted = len(ids) + (1 if finished else 0)
    return DecodeResult(
        peptide=table.peptide_from_ids(ids),
        confidence=total / n_emitted,
        total_logp=total,
        finished=finished,
    )


@dataclass(frozen=True)
class _Hyp:
    ids: tuple[int, ...]
    total: float
    finished: bool

    def live(self, max_len: int) -> bool:
        return not self.finished and len(self.ids) < max_len


def beam_search_at(model: Model, spectrum: Spectrum, width: int, max_len: int) -> list[DecodeResult]:
    """Beam search pruned by total log-probability.

    Finished (and length-capped) hypotheses stay in the pool and compete
    with growing ones. Results come back ranked by mean per-token
    log-probability. Width 1 reproduces greedy decoding bit for bit.
    """
    if width < 1:
        raise ValueError(f"beam width must be at least 1, got {width}")
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")
    table = model.table
    enc, nat_latents = _decode_context(model, spectrum)
    residue_ids = range(table.n_residues)

    beams = [_Hyp((), 0.0, False)]
    while any(h.live(max_len) for h in beams):
        candidates: list[_Hyp] = [h for h in beams if not h.live(max_len)]
        for h in beams:
            if not h.live(max_len):
                continue
            logps = _next_logps(model, spectrum, list(h.ids), enc, nat_latents)
            candidates.append(_Hyp(h.ids, h.total + float(logps[table.eos_id]), True))
            for r in residue_ids:
                candidates.append(_Hyp(h.ids + (r,), h.total + float(logps[r]), False))
        candidates.sort(key=lambda h: (-h.total, h.ids))
        beams = candidates[:width]

    results = []
    for h in beams:
        n_emitted = len(h.ids) + (1 if h.finished else 0)
        results.append(
            DecodeResult(
                peptide=table.peptide_from_ids(list(h.ids)),
                confidence=h.total / n_emitted if n_emitted else -np.inf,
                total_logp=h.total,
                finished=h.finished,
            )
        )
    results.sort(key=lambda r: (-r.confidence, tuple(r.peptide.residues)))
    return results


# ---------------------------------------------------------------------------
# precursor-mass-constrained CTC decoding


@dataclass(frozen=True)
class PMCConfig:
    """Mass window for PMC decoding, all in daltons.

    ``target_mass`` is the residue-mass sum the peptide must reach: the
    neutral precursor mass minus one water.
    """

    target_mass: float
    tolerance: float = 0.1
    bin_width: float = 0.001

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError(f"bin width must be positive, got {self.bin_width}")
        if self.tolerance < 0:
            raise ValueError(f"tolerance must be non-negative, got {self.tolerance}")

    def discretize(self, mass: float) -> int:
        return int(np.floor(mass / self.bin_width + 0.5))

    @property
    def window(self) -> tuple[int, int]:
        lo = max(0, self.discretize(self.target_mass - self.tolerance))
        hi = self.discretize(self.target_mass + self.tolerance)
        return lo, hi


@dataclass(frozen=True)
class PMCResult:
    peptide: Peptide | None
    log_prob: float
    feasible: bool


def _residue_bins(table: AminoAcidTable, cfg: PMCConfig) -> np.ndarray:
    ubin = np.array([cfg.discretize(m) for m in table.masses], dtype=np.int64)
    if np.any(ubin < 1):
        raise ValueError(
            f"bin width {cfg.bin_width} is too coarse: a residue rounds to zero bins"
        )
    return ubin

_STAY = np.int8(127)


def pmc_decode(log_probs: np.ndarray, cfg: PMCConfig, table: AminoAcidTable) -> PMCResult:
    """Best frame path whose collapsed discretized mass lands in the window.

    Dynamic program over (mass bins 0..M, last non-blank token or none),
    advanced one frame at a time. Per frame and cell the transitions are:
    emit blank (state unchanged), repeat the last non-blank token (state
    unchanged), or start a new residue l != last (mass grows by l's bins).
    The "new residue" step needs the best predecessor over all lasts except
    l, computed via the top-2 values per mass row. Back-pointers are one
    int8 per cell per frame: STAY, or the predecessor's last-token column.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, vocab = log_probs.shape
    A = table.n_residues
    if vocab != A + 1:
        raise ValueError(
            f"expected {A + 1} columns (residues + blank), got {vocab}"
        )
    if A > 126:
        raise ValueError("more residue symbols than the int8 back-pointers support")
    ubin = _residue_bins(table, cfg)
    lo, hi = cfg.window
    if hi < 0:
        return PMCResult(None, -np.inf, False)
    M = hi
    null = A  # the "no last token yet" column
    blank = table.blank_id

    logp = np.full((M + 1, A + 1), -np.inf)
    logp[0, null] = 0.0
    frames: list[np.ndarray] = []
    rows = np.arange(M + 1)

    def materialize(m: int, l: int, upto: int) -> tuple[int, ...]:
        """Residue ids of the cell's peptide after frames[0..upto] (reversed walk)."""
        out: list[int] = []
        for t in range(upto, -1, -1):
            f = int(frames[t][m, l])
            if f == _STAY:
                continue
            out.append(l)
            m -= int(ubin[l])
            l = f
        out.reverse()
        return tuple(out)

    def symbols(seq: tuple[int, ...]) -> tuple[str, ...]:
        return tuple(table.symbols[i] for i in seq)

    for t in range(T):
        e = log_probs[t]
        stay_gain = np.empty(A + 1)
        stay_gain[:A] = np.maximum(e[blank], e[:A])
        stay_gain[null] = e[blank]
        result = logp + stay_gain
        frm = np.full((M + 1, A + 1), _STAY, dtype=np.int8)

        top1i = np.argmax(logp, axis=1)
        top1v = logp[rows, top1i]
        tmp = logp.copy()
        tmp[rows, top1i] = -np.inf
        top2i = np.argmax(tmp, axis=1)
        top2v = tmp[rows, top2i]
        # How many columns achieve each candidate value (for tie detection).
        cnt1 = (logp == top1v[:, None]).sum(axis=1)
        cnt2 = (logp == top2v[:, None]).sum(axis=1)

        for l in range(A):
            u = int(ubin[l])
            if u > M:
                continue
            n = M + 1 - u
            use_top2 = top1i[:n] == l
            pv = np.where(use_top2, top2v[:n], top1v[:n])
            pi = np.where(use_top2, top2i[:n], top1i[:n])
            cand = pv + e[l]
            cur = result[u:, l]

            # Predecessor ties: more than one column != l attains pv.
            attained = np.where(use_top2, cnt2[:n], cnt1[:n])
            l_attains = logp[:n, l] == pv
            pred_ties = (attained - l_attains.astype(np.int64) >= 2) & np.isfinite(pv)

            better = cand > cur
            equal = (cand == cur) & np.isfinite(cand)
            resolve = np.flatnonzero((better | equal) & pred_ties)
            for m_pred in resolve:
                # Choose the lexicographically smallest predecessor peptide.
                cols = [
                    p
                    for p in range(A + 1)
                    if p != l and logp[m_pred, p] == pv[m_pred]
                ]
                best_p = min(
                    cols, key=lambda p: symbols(materialize(int(m_pred), p, t - 1))
                )
                pi[m_pred] = best_p

            result[u:, l] = np.where(better, cand, cur)
            col = frm[u:, l]
            col[better] = pi[better].astype(np.int8)

            for m_pred in np.flatnonzero(equal & ~better):
                m_cell = int(m_pred) + u
                stay_seq = symbols(materialize(m_cell, l, t - 1))
                new_seq = symbols(materialize(int(m_pred), int(pi[m_pred]), t - 1)) + (
                    table.symbols[l],
                )
                if new_seq < stay_seq:
                    frm[m_cell, l] = np.int8(pi[m_pred])

        frames.append(frm)
        logp = result

    window_vals = logp[lo : hi + 1]
    best = window_vals.max() if window_vals.size else -np.inf
    if not np.isfinite(best):
        return PMCResult(None, -np.inf, False)
    cells = np.argwhere(window_vals == best)
    candidates = [
        materialize(int(m) + lo, int(l), T - 1) for m, l in cells
    ]
    winner = min(candidates, key=symbols)
    return PMCResult(table.peptide_from_ids(list(winner)), float(best), True)


def pmc_bruteforce_oracle(
    log_probs: np.ndarray, cfg: PMCConfig, table: AminoAcidTable
) -> PMCResult:
    """Exhaustive enumeration of all |V|^T frame paths (small shapes only).

    Uses the same collapse semantics as the DP: a run of one residue counts
    once even when blanks interrupt it, because the last non-blank token
    survives blank frames.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, vocab = log_probs.shape
    A = table.n_residues
    if vocab != A + 1:
        raise ValueError(f"expected {A + 1} columns, got {vocab}")
    if T > 8 or vocab > 5:
        raise ValueError(
            f"oracle bound exceeded: T={T} (max 8), vocab={vocab} (max 5)"
        )
    ubin = _residue_bins(table, cfg)
    blank = table.blank_id
    lo, hi = cfg.window
    if hi < 0:
        return PMCResult(None, -np.inf, False)

    n_paths = vocab**T
    paths = np.stack(
        np.meshgrid(*[np.arange(vocab)] * T, indexing="ij"), axis=-1
    ).reshape(n_paths, T)
    path_logp = log_probs[np.arange(T), paths].sum(axis=1)

    nonblank = paths != blank
    pos = np.where(nonblank, np.arange(T), -1)
    last_pos = np.maximum.accumulate(pos, axis=1)
    prev_pos = np.concatenate(
        [np.full((n_paths, 1), -1, dtype=np.int64), last_pos[:, :-1]], axis=1
    )
    prev_val = np.where(
        prev_pos >= 0,
        np.take_along_axis(paths, np.maximum(prev_pos, 0), axis=1),
        -1,
    )
    new_event = nonblank & (paths != prev_val)
    bins_per_tok = np.append(ubin, 0)
    masses = (bins_per_tok[paths] * new_event).sum(axis=1)

    in_window = (masses >= lo) & (masses <= hi)
    if not in_window.any():
        return PMCResult(None, -np.inf, False)
    best = path_logp[in_window].max()
    tied = np.flatnonzero(in_window & (path_logp == best))
    collapses = []
    for i in tied:
        seq = tuple(int(y) for y, ev in zip(paths[i], new_event[i]) if ev)
        collapses.append(tuple(table.symbols[s] for s in seq))
    winner = min(collapses)
    return PMCResult(Peptide(winner), float(best), True)


def nat_pmc_decode(
    model: Model,
    spectrum: Spectrum,
    tolerance: float = 0.1,
    bin_width: float = 0.001,
) -> tuple[PMCResult, float]:
    """Run the NAT decoder and PMC-decode its frames.

    Returns (result, confidence); when no path satisfies the window the
    result is infeasible and the peptide falls back to the plain collapse
    of the per-frame argmax path. Confidence is the chosen path's
    log-probability averaged over frames.
    """
    enc = model.encode_spectrum(spectrum)
    logits = model.nat_forward(enc).logits.values
    log_probs = _log_softmax_np(logits)
    cfg = PMCConfig(
        target_mass=spectrum.neutral_mass - WATER,
        tolerance=tolerance,
        bin_width=bin_width,
    )
    result = pmc_decode(log_probs, cfg, model.table)
    T = log_probs.shape[0]
    if result.feasible:
        return result, result.log_prob / T
    argmax_path = log_probs.argmax(axis=1)
    path_logp = float(log_probs[np.arange(T), argmax_path].sum())
    collapsed = ctc_collapse(argmax_path.tolist(), model.table.blank_id)
    fallback = PMCResult(model.table.peptide_from_ids(collapsed), path_logp, False)
    return fallback, path_logp / T
