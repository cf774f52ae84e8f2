# =============================================================================
#           HADES TOOLKIT - SPECTRAL ANALYSIS
#           OUTPUT SPECTRA, FILTER FREQUENCY RESPONSE, EFFECTIVE RANK, CKA,
#           SELECTION BARCODES, DELTA-SHIFT HISTOGRAMS
# =============================================================================

import logging
import os
from dataclasses import dataclass
from datetime import datetime

import numpy as np
import pandas as pd

from errors import ConfigError, DegenerateInputError, ShapeError
from numerics import dft, dft_matrix, singular_values
from router import export_records_csv
from ssm_core import HeadDiscretized, materialize_matrix, scan_head

logger = logging.getLogger(__name__)

RESPONSE_CAP = 512
ZERO_TOL = 1e-12


@dataclass
class SpectralReport:
    bins: np.ndarray
    magnitude: np.ndarray
    normalization: str  # "max" or "l2"
    degenerate: bool = False

    def one_sided(self):
        half = len(self.bins) // 2 + 1
        return SpectralReport(self.bins[:half], self.magnitude[:half], self.normalization, self.degenerate)

    def to_frame(self, column="magnitude"):
        return pd.DataFrame({"bin": self.bins, column: self.magnitude})


@dataclass
class RedundancyReport:
    matrices: list          # one slot x slot CKA matrix per layer
    mean_off_diagonal: list
    mode: str = "hades"

    @property
    def overall_mean(self):
        values = [v for v in self.mean_off_diagonal if np.isfinite(v)]
        return float(np.mean(values)) if values else float("nan")


# --- Spectra ---

def output_spectrum(y, fast=True):
    """DFT magnitude along time, averaged over channels, normalized by its maximum"""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    y = y.reshape(y.shape[0], -1)
    T = y.shape[0]
    if T < 2:
        raise ValueError("output spectrum needs at least two time steps")
    magnitude = np.mean([dft(y[:, c], fast=fast).magnitude() for c in range(y.shape[1])], axis=0)
    peak = magnitude.max()
    if peak <= 0.0:
        logger.warning("output spectrum of an all-zero signal flagged degenerate")
        return SpectralReport(np.arange(T), np.zeros(T), "max", degenerate=True)
    return SpectralReport(np.arange(T), magnitude / peak, "max")


def frequency_response(matrix, cap=RESPONSE_CAP):
    """Row norms of F M F^-1 (unitary F), l2-normalized over frequency"""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"frequency response needs a square matrix, got {matrix.shape}")
    T = matrix.shape[0]
    if T > cap:
        raise ConfigError(f"T={T} exceeds the frequency-response cap of {cap}")
    F = dft_matrix(T, unitary=True)
    similar = F @ matrix @ F.conj().T
    norms = np.linalg.norm(similar, axis=1)
    total = np.linalg.norm(norms)
    if total <= 0.0:
        return SpectralReport(np.arange(T), np.zeros(T), "l2", degenerate=True)
    return SpectralReport(np.arange(T), norms / total, "l2")


def impulse_matrix(disc):
    """Filter matrix assembled column by column from scans of unit impulses"""
    T = disc.length
    columns = [scan_head(disc, np.eye(T)[s])[:, 0] for s in range(T)]
    return np.stack(columns, axis=1)


def high_band_fraction(report, cutoff=0.5):
    """Share of one-sided energy at bins >= cutoff * Nyquist"""
    side = report.one_sided()
    energy = side.magnitude ** 2
    total = energy.sum()
    if total <= 0.0:
        return 0.0
    nyquist = side.bins[-1]
    return float(energy[side.bins >= cutoff * nyquist].sum() / total)


# --- Rank and similarity ---

def effective_rank(matrix):
    """exp of the entropy of normalized singular values"""
    sigma = singular_values(matrix)
    total = sigma.sum()
    if total <= 0.0:
        raise DegenerateInputError("effective rank of an all-zero matrix")
    p = sigma[sigma > 0.0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def _center(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X - X.mean(axis=0, keepdims=True)


def linear_cka(X, Y):
    """||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with column-centered features"""
    Xc, Yc = _center(X), _center(Y)
    if Xc.shape[0] != Yc.shape[0]:
        raise ShapeError(f"CKA inputs need the same number of rows: {Xc.shape[0]} vs {Yc.shape[0]}")
    if Xc.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    cross = np.linalg.norm(Xc.T @ Yc, "fro") ** 2
    norm_x = np.linalg.norm(Xc.T @ Xc, "fro")
    norm_y = np.linalg.norm(Yc.T @ Yc, "fro")
    if norm_x == 0.0 or norm_y == 0.0:
        raise DegenerateInputError("CKA input has zero variance")
    return float(cross / (norm_x * norm_y))


# --- Model measurements ---

def layer_tape(model, ids, layer, gamma=None):
    _, _, records, _, tape = model.forward_sequence(ids, gamma=gamma)
    if not 0 <= layer < model.cfg.n_layer:
        raise ValueError(f"layer {layer} outside [0, {model.cfg.n_layer})")
    return tape["layers"][layer][2], [r for r in records if r.layer == layer]


def slot_filter_matrices(model, ids, layer=0):
    """Materialized T x T filter matrix of every slot of one layer"""
    tape, _ = layer_tape(model, ids, layer)
    D = model.params[f"layers.{layer}.D"]
    return [
        materialize_matrix(HeadDiscretized(a=tape.a[:, h], Bbar=tape.B, C=tape.C,
                                           delta=tape.delta[:, h], D=D[h]))
        for h in range(model.cfg.H)
    ]


def layer_response_matrix(model, ids, layer=0, cap=RESPONSE_CAP):
    """Slots x frequency matrix of normalized response curves"""
    return np.stack([frequency_response(m, cap=cap).magnitude for m in slot_filter_matrices(model, ids, layer)])


def layer_effective_ranks(model, ids, cap=RESPONSE_CAP):
    return pd.DataFrame([
        {"layer": layer, "effective_rank": effective_rank(layer_response_matrix(model, ids, layer, cap))}
        for layer in range(model.cfg.n_layer)
    ])


def slot_cka_matrix(y):
    """Pairwise CKA between slot outputs y (T, H, P); zero-variance pairs are NaN"""
    H = y.shape[1]
    matrix = np.eye(H)
    for i in range(H):
        for j in range(i + 1, H):
            try:
                value = linear_cka(y[:, i, :], y[:, j, :])
            except DegenerateInputError:
                logger.warning("slot %d or %d has zero variance; CKA left undefined", i, j)
                value = float("nan")
            matrix[i, j] = matrix[j, i] = value
    return matrix


def redundancy_report(model, ids, mode="hades"):
    matrices, means = [], []
    for layer in range(model.cfg.n_layer):
        tape, _ = layer_tape(model, ids, layer)
        matrix = slot_cka_matrix(tape.y)
        H = matrix.shape[0]
        off = matrix[~np.eye(H, dtype=bool)]
        means.append(float(np.nanmean(off)) if off.size and np.isfinite(off).any() else float("nan"))
        matrices.append(matrix)
    return RedundancyReport(matrices=matrices, mean_off_diagonal=means, mode=mode)


def _group_spectrum(y, slots):
    if not slots:
        return None
    return output_spectrum(y[:, slots, :]).one_sided()


def slot_group_spectra(model, ids, layer=0):
    """One-sided spectra of shared slots, expert slots, and expert slots with the bias removed"""
    Q, H = model.cfg.Q, model.cfg.H
    tape, _ = layer_tape(model, ids, layer)
    unbiased, _ = layer_tape(model, ids, layer, gamma=0.0)
    groups = {
        "shared": _group_spectrum(tape.y, list(range(Q, H))),
        "expert_biased": _group_spectrum(tape.y, list(range(Q))),
        "expert_unbiased": _group_spectrum(unbiased.y, list(range(Q))),
    }
    T = tape.y.shape[0]
    frame = pd.DataFrame({"bin": np.arange(T // 2 + 1)})
    for name, report in groups.items():
        frame[name] = report.magnitude if report is not None else np.nan
    return frame


def gamma_sweep(model, ids, gammas, layer=0):
    """Expert-slot spectrum and its high-band share for each bias scale"""
    Q = model.cfg.Q
    if Q == 0:
        raise ConfigError("gamma sweep needs at least one expert slot")
    spectra, shares = {}, []
    for gamma in gammas:
        tape, _ = layer_tape(model, ids, layer, gamma=gamma)
        report = output_spectrum(tape.y[:, :Q, :]).one_sided()
        spectra[f"gamma_{gamma:g}"] = report.magnitude
        shares.append({"gamma": gamma, "high_band_fraction": high_band_fraction(report)})
    T = len(next(iter(spectra.values())))
    frame = pd.DataFrame({"bin": np.arange(T), **spectra})
    return frame, pd.DataFrame(shares)


def default_shift_edges():
    magnitudes = np.logspace(-6, 1, 15)
    return np.concatenate([-magnitudes[::-1], [-ZERO_TOL, ZERO_TOL], magnitudes])


def delta_shift_histogram(model, ids_stream, edges=None, layer=None):
    """Counts of (delta with bias) - (delta without) over every expert slot.

    The bin [-1e-12, 1e-12) is the zero bin; values beyond the outer edges
    land in the outermost bins.
    """
    edges = default_shift_edges() if edges is None else np.asarray(edges, dtype=float)
    shifts = []
    for ids in ids_stream:
        _, _, records, _, _ = model.forward_sequence(ids)
        shifts.extend(r.delta_shift for r in records
                      if (layer is None or r.layer == layer) and r.delta_shift is not None)
    values = np.concatenate(shifts) if shifts else np.zeros(0)
    clipped = np.clip(values, edges[0], np.nextafter(edges[-1], -np.inf))
    counts, _ = np.histogram(clipped, bins=edges)
    return pd.DataFrame({
        "bin_left": edges[:-1], "bin_right": edges[1:], "count": counts,
        "zero_bin": (edges[:-1] == -ZERO_TOL) & (edges[1:] == ZERO_TOL),
    })


def selection_barcode(records, labels, E, layer=0):
    """Token x expert 0/1 activation matrix with the region label of each token"""
    rows = sorted((r for r in records if r.layer == layer), key=lambda r: r.token_index)
    if len(rows) != len(labels):
        raise ShapeError(f"{len(rows)} selection records but {len(labels)} region labels")
    matrix = np.zeros((len(rows), E), dtype=int)
    for i, record in enumerate(rows):
        matrix[i, list(record.expert_ids)] = 1
    frame = pd.DataFrame(matrix, columns=[f"expert_{e}" for e in range(E)])
    frame.insert(0, "region", list(labels))
    frame.insert(0, "token_index", [r.token_index for r in rows])
    return frame


# --- Analyzer ---

class ModelAnalyzer:
    """Runs the diagnostic suite for one model and input, writing CSV files and a summary"""

    def __init__(self, model, ids, out_dir=".", config_hash="unknown", labels=None):
        self.model = model
        self.ids = np.asarray(ids, dtype=int)
        self.out_dir = out_dir
        self.config_hash = config_hash
        self.labels = labels
        self.results = {}

    def _write(self, frame, name, normalization="none"):
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, f"{name}.csv")
        with open(path, "w", newline="") as f:
            f.write(f"# config_hash={self.config_hash} {name} normalization={normalization}\n")
            frame.to_csv(f, index=False)
        print(f"  [OK] {name}: {len(frame)} rows -> {path}")
        return path

    def run_spectrum(self, layer=0):
        tape, _ = layer_tape(self.model, self.ids, layer)
        report = output_spectrum(tape.y)
        if report.degenerate:
            print("  [WARNING] output spectrum is degenerate (all-zero signal)")
        frame = report.one_sided().to_frame()
        self.results["spectrum"] = frame
        self.results["slot_groups"] = slot_group_spectra(self.model, self.ids, layer)
        self._write(self.results["slot_groups"], "slot_group_spectra", "max")
        return self._write(frame, "output_spectrum", "max")

    def run_response(self, layer=0):
        curves = layer_response_matrix(self.model, self.ids, layer)
        frame = pd.DataFrame(curves.T, columns=[f"slot_{h}" for h in range(curves.shape[0])])
        frame.insert(0, "bin", np.arange(curves.shape[1]))
        self.results["response"] = frame
        self.results["high_band"] = [
            high_band_fraction(SpectralReport(np.arange(curves.shape[1]), c, "l2")) for c in curves
        ]
        return self._write(frame, "frequency_response", "l2")

    def run_effrank(self):
        frame = layer_effective_ranks(self.model, self.ids)
        self.results["effrank"] = frame
        return self._write(frame, "effective_rank")

    def run_cka(self):
        report = redundancy_report(self.model, self.ids)
        rows = []
        for layer, matrix in enumerate(report.matrices):
            for i in range(matrix.shape[0]):
                for j in range(matrix.shape[1]):
                    rows.append({"layer": layer, "slot_i": i, "slot_j": j, "cka": matrix[i, j]})
        self.results["cka"] = report
        return self._write(pd.DataFrame(rows), "cka")

    def run_barcode(self, layer=0):
        labels = self.labels if self.labels is not None else ["input"] * len(self.ids)
        _, records = layer_tape(self.model, self.ids, layer)
        frame = selection_barcode(records, labels, self.model.cfg.E, layer=layer)
        self.results["barcode"] = frame
        os.makedirs(self.out_dir, exist_ok=True)
        export_records_csv(records, os.path.join(self.out_dir, "selection_records.csv"),
                           header_line=f"config_hash={self.config_hash} selection_records")
        return self._write(frame, "selection_barcode")

    def run_delta_hist(self):
        frame = delta_shift_histogram(self.model, [self.ids])
        self.results["delta_hist"] = frame
        return self._write(frame, "delta_shift_histogram")

    def export_summary_report(self, filename="analysis_summary.txt"):
        """Plain-text summary of every analysis that has run"""
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, filename)
        with open(path, "w") as f:
            f.write("HADES MODEL ANALYSIS SUMMARY\n")
            f.write("=" * 50 + "\n")
            f.write(f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n")
            f.write(f"Config hash: {self.config_hash}\n")
            f.write(f"Tokens analyzed: {len(self.ids)}\n\n")
            if "effrank" in self.results:
                f.write("EFFECTIVE RANK PER LAYER\n")
                for row in self.results["effrank"].itertuples():
                    f.write(f"  Layer {row.layer}: {row.effective_rank:.4f}\n")
                f.write("\n")
            if "cka" in self.results:
                f.write("SLOT REDUNDANCY (mean off-diagonal CKA)\n")
                for layer, value in enumerate(self.results["cka"].mean_off_diagonal):
                    f.write(f"  Layer {layer}: {value:.4f}\n")
                f.write("\n")
            if "high_band" in self.results:
                f.write("HIGH-BAND ENERGY FRACTION PER SLOT\n")
                for slot, value in enumerate(self.results["high_band"]):
                    f.write(f"  Slot {slot}: {value:.4f}\n")
                f.write("\n")
            if "delta_hist" in self.results:
                hist = self.results["delta_hist"]
                zero = int(hist.loc[hist["zero_bin"], "count"].sum())
                f.write(f"DELTA SHIFT: {zero} of {int(hist['count'].sum())} expert slots unshifted\n")
        print(f"  [OK] summary report -> {path}")
        return path

    def run_full_analysis(self):
        print("HADES MODEL ANALYSIS")
        print("=" * 70)
        self.run_spectrum()
        self.run_response()
        self.run_effrank()
        self.run_cka()
        if self.model.cfg.Q > 0:
            self.run_barcode()
            self.run_delta_hist()
        self.export_summary_report()
        print("=" * 70)
        return self.results
