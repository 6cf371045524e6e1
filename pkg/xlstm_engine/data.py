"""
Training data: byte-level ingestion, packed token files with a document
index, and batch loaders that mark EOD boundaries for state resets.

Token file: flat little-endian uint32 ids (`<prefix>.bin`).
Index file: little-endian uint64 document start offsets plus the total
length as the last entry (`<prefix>.idx`).
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from xlstm_engine.errors import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

BYTE_VOCAB_SIZE = 257
EOD_TOKEN = 256
IGNORE_INDEX = -100

TOKEN_DTYPE = np.dtype("<u4")
OFFSET_DTYPE = np.dtype("<u8")


@dataclass
class TokenBatch:
    """Inputs (B, T), next-token targets (B, T) and the EOD mask of the inputs"""
    tokens: torch.Tensor
    targets: torch.Tensor
    eod_mask: torch.Tensor

    @classmethod
    def from_windows(cls, windows: np.ndarray, eod_id: Optional[int] = EOD_TOKEN) -> "TokenBatch":
        windows = torch.as_tensor(np.asarray(windows, dtype=np.int64))
        if windows.dim() != 2 or windows.shape[1] < 2:
            raise ShapeMismatchError(f"windows must be (B, T+1) with T >= 1, got {tuple(windows.shape)}")
        tokens = windows[:, :-1].contiguous()
        targets = windows[:, 1:].contiguous()
        eod_mask = tokens == eod_id if eod_id is not None else torch.zeros_like(tokens, dtype=torch.bool)
        return cls(tokens, targets, eod_mask)

    @property
    def reset_mask(self) -> torch.Tensor:
        """True where the previous input token was EOD."""
        mask = torch.zeros_like(self.eod_mask)
        mask[:, 1:] = self.eod_mask[:, :-1]
        return mask

    @property
    def num_tokens(self) -> int:
        return int((self.targets != IGNORE_INDEX).sum())


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(TOKEN_DTYPE)


def decode_tokens(tokens: Iterable[int]) -> str:
    """Byte-level ids back to text; EOD and out-of-byte ids are dropped."""
    return bytes(t for t in tokens if 0 <= t < 256).decode("utf-8", errors="replace")


def pack_documents(docs: Iterable[Sequence[int]], eod_id: int = EOD_TOKEN) -> Tuple[np.ndarray, np.ndarray]:
    """Concatenate documents, each followed by EOD; returns (tokens, offsets)."""
    pieces: List[np.ndarray] = []
    offsets = [0]
    for doc in docs:
        arr = np.asarray(doc, dtype=TOKEN_DTYPE)
        pieces.append(arr)
        pieces.append(np.array([eod_id], dtype=TOKEN_DTYPE))
        offsets.append(offsets[-1] + len(arr) + 1)
    tokens = np.concatenate(pieces) if pieces else np.zeros(0, dtype=TOKEN_DTYPE)
    return tokens, np.asarray(offsets, dtype=OFFSET_DTYPE)


def write_token_file(prefix: Union[str, Path], tokens: np.ndarray, offsets: np.ndarray) -> Tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    bin_path, idx_path = prefix.with_suffix(".bin"), prefix.with_suffix(".idx")
    np.asarray(tokens, dtype=TOKEN_DTYPE).tofile(bin_path)
    np.asarray(offsets, dtype=OFFSET_DTYPE).tofile(idx_path)
    return bin_path, idx_path


class TokenFile:
    """Memory-mapped packed token stream with its document index"""

    def __init__(self, prefix: Union[str, Path]):
        prefix = Path(prefix)
        self.bin_path = prefix.with_suffix(".bin")
        self.idx_path = prefix.with_suffix(".idx")
        if not self.bin_path.exists() or not self.idx_path.exists():
            raise ConfigurationError(f"token files {self.bin_path} / {self.idx_path} not found")
        self.tokens = np.memmap(self.bin_path, dtype=TOKEN_DTYPE, mode="r")
        self.offsets = np.fromfile(self.idx_path, dtype=OFFSET_DTYPE)
        if len(self.offsets) == 0 or int(self.offsets[-1]) != len(self.tokens):
            raise ConfigurationError(f"index {self.idx_path} does not cover {self.bin_path}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_documents(self) -> int:
        return len(self.offsets) - 1

    def document(self, i: int) -> np.ndarray:
        """Tokens of document i, including its trailing EOD."""
        return np.asarray(self.tokens[int(self.offsets[i]):int(self.offsets[i + 1])])


def ingest_text(paths: Sequence[Union[str, Path]], prefix: Union[str, Path], eod_id: int = EOD_TOKEN) -> TokenFile:
    """Convert UTF-8 text files (one document per file) into a packed byte-level token file."""
    docs = [encode_text(Path(p).read_text(encoding="utf-8")) for p in paths]
    tokens, offsets = pack_documents(docs, eod_id)
    write_token_file(prefix, tokens, offsets)
    logger.info(f"✅ Ingested {len(docs)} documents ({len(tokens):,} tokens) into {prefix}")
    return TokenFile(prefix)


class PackedBatchLoader:
    """Windows of context+1 tokens from a packed stream, at a per-call batch size"""

    def __init__(
        self,
        tokens: np.ndarray,
        context_length: int,
        eod_id: Optional[int] = EOD_TOKEN,
        seed: int = 0,
        shuffle: bool = True,
    ):
        if len(tokens) < context_length + 1:
            raise ConfigurationError(
                f"stream of {len(tokens)} tokens is shorter than one window of {context_length + 1}"
            )
        self.tokens = tokens
        self.context_length = context_length
        self.eod_id = eod_id
        self.seed = seed
        self.shuffle = shuffle
        self.reset()

    def reset(self):
        self.rng = np.random.default_rng(self.seed)
        self.position = 0

    def next_batch(self, batch_size: int) -> TokenBatch:
        span = self.context_length + 1
        if self.shuffle:
            starts = self.rng.integers(0, len(self.tokens) - span + 1, size=batch_size)
        else:
            starts = []
            for _ in range(batch_size):
                if self.position + span > len(self.tokens):
                    self.position = 0
                starts.append(self.position)
                self.position += self.context_length
        windows = np.stack([np.asarray(self.tokens[s:s + span], dtype=np.int64) for s in starts])
        return TokenBatch.from_windows(windows, self.eod_id)


class FixedBatchLoader:
    """Returns the same sample every step (memorization runs)"""

    def __init__(self, sample: Sequence[int], eod_id: Optional[int] = None):
        self.batch = TokenBatch.from_windows(np.asarray(sample, dtype=np.int64)[None, :], eod_id)

    def reset(self):
        pass

    def next_batch(self, batch_size: int) -> TokenBatch:
        return self.batch


def repeated_text_sample(text: str = "the quick brown fox jumps over the lazy dog. ", length: int = 512) -> np.ndarray:
    reps = length // len(text) + 1
    return encode_text(text * reps)[:length]


def spiky_stream(
    num_tokens: int,
    vocab_size: int = BYTE_VOCAB_SIZE,
    eod_id: int = EOD_TOKEN,
    seed: int = 0,
    run_length: int = 64,
    burst_prob: float = 0.05,
) -> np.ndarray:
    """
    Synthetic packed stream of documents made of long single-token runs
    interrupted by rare bursts of uniformly random tokens.
    """
    rng = np.random.default_rng(seed)
    ordinary = min(vocab_size, eod_id)
    out = np.empty(num_tokens, dtype=TOKEN_DTYPE)
    i = 0
    while i < num_tokens:
        doc_len = int(rng.integers(run_length, 8 * run_length))
        j = 0
        while j < doc_len and i < num_tokens:
            if rng.random() < burst_prob:
                n = min(int(rng.integers(1, 8)), num_tokens - i)
                out[i:i + n] = rng.integers(0, ordinary, size=n)
            else:
                n = min(int(rng.integers(1, run_length)), num_tokens - i)
                out[i:i + n] = rng.integers(0, ordinary)
            i += n
            j += n
        if i < num_tokens:
            out[i] = eod_id
            i += 1
    return out
