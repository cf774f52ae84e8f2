# =============================================================================
#           HADES TOOLKIT - TASK HARNESS
#           BYTE TOKENIZER, COPY / FREQUENCY-MIX TASKS, PASSKEY RETRIEVAL
# =============================================================================

import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from errors import ConfigError, MissingInputError
from model import provenance_line
from numerics import Rng
from trainer import IGNORE_INDEX

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256

TASK_DESCRIPTION = (
    "There is an important piece of information hidden inside a lot of irrelevant text. "
    "Find it and memorize it. I will quiz you about this important information."
)
PASSKEY_SENTENCE = " The pass key is {key}. Remember it. {key} is the pass key."
QUERY = " What is the pass key? The pass key is"
DUMMY_GRANULE = " The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again."

REGIONS = ("task_description", "passkey", "query", "dummy")
DEPTH_GRID = tuple(range(0, 101, 10))
DESK_CONTEXT_LENGTHS = (256, 512, 1024, 2048, 4096)
LONG_CONTEXT_LENGTHS = (1024, 2048, 4096, 8192, 16384)

TASKS = ("copy", "freq_mix", "passkey", "bytes")


# --- Byte tokenizer ---

def byte_tokenize(text):
    """UTF-8 bytes of text (or the bytes themselves) as ids in [0, 256)"""
    data = text if isinstance(text, (bytes, bytearray)) else str(text).encode("utf-8")
    return list(data)


def byte_detokenize(ids, as_bytes=False):
    ids = [int(i) for i in ids]
    bad = [i for i in ids if i < 0 or i >= BYTE_VOCAB]
    if bad:
        raise ValueError(f"byte id outside [0, {BYTE_VOCAB}): {bad[0]}")
    data = bytes(ids)
    return data if as_bytes else data.decode("utf-8", errors="replace")


# --- Copy task ---

def copy_task(rng, T, vocab, alphabet=None, distinct=False):
    """Random source, delimiter, then the source again; only the copy region is supervised.

    Symbols come from [0, alphabet) with alphabet <= vocab - 1 (default
    vocab - 1); vocab - 1 is the delimiter. ``distinct`` draws the source
    without repeats, so every symbol has a unique successor.
    """
    if T < 2 or T % 2:
        raise ValueError(f"copy task length must be even and >= 2, got {T}")
    if vocab < 2:
        raise ValueError("copy task needs at least one symbol plus the delimiter")
    half = T // 2
    alphabet = vocab - 1 if alphabet is None else int(alphabet)
    if not 1 <= alphabet <= vocab - 1:
        raise ValueError(f"copy alphabet must lie in [1, {vocab - 1}], got {alphabet}")
    if distinct and alphabet < half:
        raise ValueError(f"{half} distinct symbols need an alphabet of at least {half}, got {alphabet}")
    delimiter = vocab - 1
    if distinct:
        source = rng.permutation(alphabet)[:half]
    else:
        source = rng.integers(0, alphabet, (half,))
    sequence = np.concatenate([source, [delimiter], source])
    inputs = sequence[:-1].astype(int)
    targets = sequence[1:].astype(int)
    targets[:half] = IGNORE_INDEX
    return inputs, targets


def copy_batch(rng, batch, T, vocab, alphabet=None, distinct=False):
    pairs = [copy_task(rng, T, vocab, alphabet, distinct) for _ in range(batch)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# --- Frequency-mix task ---

@dataclass
class FreqMixSample:
    signal: np.ndarray
    tokens: np.ndarray
    slow_bin: int
    fast_bin: int

    @property
    def inputs(self):
        return self.tokens[:-1]

    @property
    def targets(self):
        return self.tokens[1:]


def quantize(signal, levels=16):
    """Map min..max linearly onto integer levels 0..levels-1"""
    signal = np.asarray(signal, dtype=float)
    low, high = signal.min(), signal.max()
    if high == low:
        return np.zeros(signal.shape, dtype=int)
    return np.rint((signal - low) / (high - low) * (levels - 1)).astype(int)


def freq_mix_task(rng, T, levels=16, fast_amplitude=1.0, slow_bin=None, fast_bin=None):
    """Slow plus fast sinusoid on integer DFT bins with random phases, quantized to tokens"""
    if T < 32:
        raise ValueError(f"frequency-mix task needs T >= 32, got {T}")
    slow_bin = slow_bin if slow_bin is not None else int(rng.integers(1, T // 16 + 1))
    fast_bin = fast_bin if fast_bin is not None else int(rng.integers(T // 4, T // 2))
    phases = rng.uniform((2,), 0.0, 2.0 * np.pi)
    t = np.arange(T)
    signal = (np.cos(2.0 * np.pi * slow_bin * t / T + phases[0])
              + fast_amplitude * np.cos(2.0 * np.pi * fast_bin * t / T + phases[1]))
    return FreqMixSample(signal=signal, tokens=quantize(signal, levels), slow_bin=slow_bin, fast_bin=fast_bin)


# --- Passkey retrieval ---

@dataclass
class PasskeySpec:
    context_lengths: tuple = DESK_CONTEXT_LENGTHS
    depths: tuple = DEPTH_GRID
    trials: int = 10
    passkey_digits: int = 5
    seed: int = 0

    def validate(self):
        if not self.context_lengths:
            raise ConfigError("passkey sweep needs at least one context length")
        off_grid = [d for d in self.depths if d not in DEPTH_GRID]
        if off_grid or not self.depths:
            raise ConfigError(f"depths must be drawn from {DEPTH_GRID}, got {list(self.depths)}")
        if self.trials < 1 or self.passkey_digits < 1:
            raise ConfigError("trials and passkey_digits must be positive")
        return self


@dataclass
class PasskeyPrompt:
    ids: np.ndarray
    labels: list
    passkey: str
    depth: int
    context_length: int
    spans: list = field(default_factory=list)  # (region, start, end)

    @property
    def text(self):
        return byte_detokenize(self.ids)

    def region_text(self, region):
        return "".join(byte_detokenize(self.ids[start:end]) for name, start, end in self.spans if name == region)


def build_passkey_prompt(spec, context_length, depth, rng, passkey=None):
    """Task description, dummy filler, passkey sentence pair, dummy filler, query.

    Filler is whole dummy granules; ``depth`` percent of them go before the passkey.
    """
    if depth not in DEPTH_GRID:
        raise ValueError(f"depth {depth} is not on the {DEPTH_GRID} grid")
    passkey = passkey if passkey is not None else rng.digits(spec.passkey_digits)
    if not passkey.isdigit():
        raise ValueError("passkey must contain digits only")
    parts = {
        "task_description": byte_tokenize(TASK_DESCRIPTION),
        "passkey": byte_tokenize(PASSKEY_SENTENCE.format(key=passkey)),
        "query": byte_tokenize(QUERY),
    }
    granule = byte_tokenize(DUMMY_GRANULE)
    mandatory = sum(len(p) for p in parts.values())
    if mandatory > context_length:
        raise ValueError(f"context length {context_length} cannot hold the {mandatory} mandatory tokens")
    granules = (context_length - mandatory) // len(granule)
    before = int(round(granules * depth / 100.0))
    after = granules - before

    layout = [
        ("task_description", parts["task_description"]),
        ("dummy", granule * before),
        ("passkey", parts["passkey"]),
        ("dummy", granule * after),
        ("query", parts["query"]),
    ]
    ids, labels, spans = [], [], []
    for region, tokens in layout:
        if not tokens:
            continue
        spans.append((region, len(ids), len(ids) + len(tokens)))
        ids.extend(tokens)
        labels.extend([region] * len(tokens))
    return PasskeyPrompt(ids=np.asarray(ids, dtype=int), labels=labels, passkey=passkey,
                         depth=depth, context_length=context_length, spans=spans)


def passkey_training_sample(spec, context_length, depth, rng):
    """Prompt followed by the answer digits; only the answer is supervised"""
    prompt = build_passkey_prompt(spec, context_length, depth, rng)
    answer = byte_tokenize(" " + prompt.passkey)
    sequence = np.concatenate([prompt.ids, answer])
    inputs = sequence[:-1].astype(int)
    targets = sequence[1:].astype(int)
    targets[:len(prompt.ids) - 1] = IGNORE_INDEX
    return inputs, targets


DIGITS = re.compile(r"\d+")


def extract_digits(text):
    match = DIGITS.search(text)
    return match.group(0) if match else ""


def passkey_trial_rng(spec, context_length, depth, trial):
    return Rng.keyed(spec.seed, context_length, depth, trial)


def score_passkey(model, spec, max_new_tokens=None, progress=False):
    """Greedy-decode after every prompt; exact digit match scores 1.

    ``model`` is anything with ``generate(prompt_ids, max_new_tokens)``.
    Returns a frame with columns context_length, depth_percent, score, trials.
    """
    spec.validate()
    max_new_tokens = max_new_tokens or spec.passkey_digits + 3
    cells = [(length, depth) for length in spec.context_lengths for depth in spec.depths]
    rows = []
    for length, depth in tqdm(cells, desc="Passkey", disable=not progress):
        score = 0
        for trial in range(spec.trials):
            prompt = build_passkey_prompt(spec, length, depth, passkey_trial_rng(spec, length, depth, trial))
            produced = model.generate(prompt.ids, max_new_tokens)
            text = byte_detokenize([t for t in produced if 0 <= t < BYTE_VOCAB])
            score += int(extract_digits(text) == prompt.passkey)
        rows.append({"context_length": length, "depth_percent": depth, "score": score, "trials": spec.trials})
    return pd.DataFrame(rows, columns=["context_length", "depth_percent", "score", "trials"])


class PasskeyEvaluator:
    """Runs the passkey grid for one model and writes the grid CSV"""

    def __init__(self, model, spec, out_dir=".", run_dict=None):
        self.model = model
        self.spec = spec.validate()
        self.out_dir = out_dir
        self.run_dict = run_dict or {"model": model.cfg.to_dict(), "passkey": spec.__dict__}
        self.results = None

    def run(self, progress=True):
        print("PASSKEY RETRIEVAL EVALUATION")
        print("=" * 70)
        print(f"Context lengths: {list(self.spec.context_lengths)}")
        print(f"Depths: {list(self.spec.depths)} | Trials per cell: {self.spec.trials}")
        print("=" * 70)
        self.results = score_passkey(self.model, self.spec, progress=progress)
        return self.results

    def export_grid(self, filename="passkey_grid.csv"):
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, filename)
        with open(path, "w", newline="") as f:
            f.write(provenance_line(self.run_dict, "passkey_grid") + "\n")
            self.results.to_csv(f, index=False)
        total = int(self.results["score"].sum())
        possible = int(self.results["trials"].sum())
        print(f"[OK] Retrieval score {total}/{possible}")
        for length, group in self.results.groupby("context_length"):
            print(f"   • {length:6d} tokens: {group['score'].sum():4d}/{group['trials'].sum():4d}")
        print(f"Results saved to: {path}")
        return path


# --- Task streams for training ---

def load_byte_corpus(path):
    if not os.path.exists(path):
        raise MissingInputError(f"corpus not found: {path}")
    with open(path, "rb") as f:
        data = np.frombuffer(f.read(), dtype=np.uint8).astype(int)
    if data.size < 2:
        raise ConfigError(f"corpus {path} is too short to train on")
    return data


def make_task_stream(task, vocab, batch, seq_len, seed, corpus_path=None, passkey_spec=None,
                     copy_alphabet=None, copy_distinct=False):
    """Callable step -> (inputs, targets) batches, reproducible from (seed, step)"""
    if task not in TASKS:
        raise ConfigError(f"unknown task '{task}', expected one of {TASKS}")
    corpus = load_byte_corpus(corpus_path) if task == "bytes" else None
    spec = passkey_spec or PasskeySpec(seed=seed)
    if task in ("bytes", "passkey") and vocab < BYTE_VOCAB:
        raise ConfigError(f"task '{task}' needs a byte vocabulary of {BYTE_VOCAB}")

    def stream(step):
        rng = Rng.keyed(seed, 3, step)
        if task == "copy":
            return copy_batch(rng, batch, seq_len, vocab, copy_alphabet, copy_distinct)
        if task == "freq_mix":
            samples = [freq_mix_task(rng, seq_len + 1, levels=min(16, vocab)) for _ in range(batch)]
            return (np.stack([s.inputs for s in samples]), np.stack([s.targets for s in samples]))
        if task == "passkey":
            pairs = [passkey_training_sample(spec, seq_len, int(rng.choice(len(DEPTH_GRID), 1)[0]) * 10, rng)
                     for _ in range(batch)]
            return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
        if corpus.size <= seq_len:
            raise ConfigError(f"corpus shorter than seq_len {seq_len}")
        starts = rng.integers(0, corpus.size - seq_len, (batch,))
        windows = np.stack([corpus[s:s + seq_len + 1] for s in starts])
        return windows[:, :-1], windows[:, 1:]

    return stream
