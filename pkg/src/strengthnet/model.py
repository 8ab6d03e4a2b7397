"""StrengthNet: CNN acoustic encoder + BiLSTM strength and emotion predictors."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import InvalidInput, NumericalError

CKPT_MAGIC = b"STRENGTHNET-CKPT-1"
CE_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    mel_channels: int = 80
    block_filters: tuple = (16, 32, 64, 128)
    layers_per_block: int = 3
    layer_strides: tuple = ((1, 1), (1, 1), (1, 3))  # (time, frequency)
    kernel: tuple = (3, 3)
    bilstm_cells_per_direction: int = 128
    fc_hidden: int = 128
    dropout_rate: float = 0.3
    num_emotions: int = 4

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(int(f) for f in self.block_filters))
        object.__setattr__(self, "layer_strides", tuple(tuple(int(v) for v in s) for s in self.layer_strides))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if len(self.layer_strides) != self.layers_per_block:
            raise InvalidInput("need one stride per layer in a block")
        if any(s[0] != 1 for s in self.layer_strides):
            raise InvalidInput("time strides must be 1 so every frame keeps a score")
        if any(k % 2 == 0 for k in self.kernel):
            raise InvalidInput("kernel sizes must be odd for same padding")

    @property
    def num_conv_layers(self) -> int:
        return len(self.block_filters) * self.layers_per_block

    @property
    def freq_bins_out(self) -> int:
        f = self.mel_channels
        for _ in self.block_filters:
            for _, sf in self.layer_strides:
                f = math.ceil(f / sf)
        return f

    @property
    def encoder_dim(self) -> int:
        return self.block_filters[-1] * self.freq_bins_out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Prediction:
    frame_scores: torch.Tensor  # (B, T), zero beyond each length
    utterance_score: torch.Tensor  # (B,)
    emotion_logits: torch.Tensor  # (B, K)
    emotion_probs: torch.Tensor  # (B, K)
    lengths: torch.Tensor  # (B,)
    strength_hidden: torch.Tensor | None = None  # (B, T, 2 * cells)
    emotion_hidden: torch.Tensor | None = None

    @property
    def mask(self) -> torch.Tensor:
        return lengths_to_mask(self.lengths, self.frame_scores.shape[1]).to(self.frame_scores.dtype)


@dataclass
class LossBreakdown:
    frame_mae: torch.Tensor
    utterance_mae: torch.Tensor
    category_ce: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {"frame_mae": self.frame_mae.item(), "utterance_mae": self.utterance_mae.item(),
                "category_ce": self.category_ce.item(), "total": self.total.item()}


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def masked_mean(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Mean over the first ``lengths[b]`` steps of axis 1; ``x`` must be zero beyond them."""
    n = lengths.to(x.dtype).reshape(-1, *([1] * (x.dim() - 2)))
    return x.sum(dim=1) / n


def _uniform_(tensor: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


class StrengthNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        kt, kf = config.kernel
        convs = []
        in_ch = 1
        for filters in config.block_filters:
            for stride in config.layer_strides:
                convs.append(nn.Conv2d(in_ch, filters, (kt, kf), stride=stride, padding=(kt // 2, kf // 2)))
                in_ch = filters
        self.encoder = nn.ModuleList(convs)
        cells = config.bilstm_cells_per_direction
        self.strength_lstm = nn.LSTM(config.encoder_dim, cells, batch_first=True, bidirectional=True)
        self.strength_fc1 = nn.Linear(2 * cells, config.fc_hidden)
        self.strength_dropout = nn.Dropout(config.dropout_rate)
        self.strength_fc2 = nn.Linear(config.fc_hidden, 1)
        self.emotion_lstm = nn.LSTM(config.encoder_dim, cells, batch_first=True, bidirectional=True)
        self.emotion_out = nn.Linear(2 * cells, config.num_emotions)

    def emotion_parameters(self):
        yield from self.emotion_lstm.parameters()
        yield from self.emotion_out.parameters()

    # -- forward pieces ---------------------------------------------------

    def encode(self, mel: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(B, T, C) mel -> (B, T, encoder_dim); padded frames are re-zeroed after each layer."""
        if mel.dim() != 3 or mel.shape[2] != self.config.mel_channels:
            raise InvalidInput(f"expected (batch, frames, {self.config.mel_channels}) input, got {tuple(mel.shape)}")
        mask = lengths_to_mask(lengths, mel.shape[1]).to(mel.dtype)[:, None, :, None]
        x = mel.unsqueeze(1) * mask
        for conv in self.encoder:
            x = torch.relu(conv(x)) * mask
        b, c, t, f = x.shape
        return x.permute(0, 2, 1, 3).reshape(b, t, c * f)

    @staticmethod
    def _bilstm(lstm: nn.LSTM, h: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(h, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=h.shape[1])
        return out

    @staticmethod
    def _check_lengths(lengths: torch.Tensor, max_len: int) -> None:
        if lengths.numel() == 0 or int(lengths.min()) < 1:
            raise InvalidInput("every utterance needs at least one valid frame")
        if int(lengths.max()) > max_len:
            raise InvalidInput("length exceeds padded frame count")

    def strength(self, h: torch.Tensor, lengths: torch.Tensor):
        """Returns (frame scores (B, T), utterance scores (B,), hidden S)."""
        self._check_lengths(lengths, h.shape[1])
        s = self._bilstm(self.strength_lstm, h, lengths)
        z = self.strength_dropout(torch.relu(self.strength_fc1(s)))
        frames = self.strength_fc2(z).squeeze(-1)
        frames = frames * lengths_to_mask(lengths, h.shape[1]).to(frames.dtype)
        return frames, masked_mean(frames, lengths), s

    def emotion(self, h: torch.Tensor, lengths: torch.Tensor):
        """Returns (logits (B, K), probabilities (B, K), hidden S_hat)."""
        self._check_lengths(lengths, h.shape[1])
        s_hat = self._bilstm(self.emotion_lstm, h, lengths)
        pooled = masked_mean(s_hat, lengths)
        logits = self.emotion_out(pooled)
        return logits, torch.softmax(logits, dim=-1), s_hat

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor) -> Prediction:
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        self._check_lengths(lengths, mel.shape[1])
        h = self.encode(mel, lengths)
        frames, utterance, s = self.strength(h, lengths)
        logits, probs, s_hat = self.emotion(h, lengths)
        return Prediction(frames, utterance, logits, probs, lengths, s, s_hat)


def init_params(config: ModelConfig = ModelConfig(), rng_seed: int = 0, dtype=torch.float32) -> StrengthNet:
    """Build a model with seeded fan-in-scaled uniform weights.

    Conv/linear weights: U(+-sqrt(6 / fan_in)) before ReLU, U(+-sqrt(3 / fan_in)) otherwise.
    LSTM weights: U(+-1 / sqrt(cells)).  All biases zero except LSTM forget gates at 1.
    """
    model = StrengthNet(config)
    gen = torch.Generator().manual_seed(int(rng_seed))
    for conv in model.encoder:
        fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
        _uniform_(conv.weight, math.sqrt(6.0 / fan_in), gen)
        nn.init.zeros_(conv.bias)
    for lin, gain in ((model.strength_fc1, 6.0), (model.strength_fc2, 3.0), (model.emotion_out, 3.0)):
        _uniform_(lin.weight, math.sqrt(gain / lin.in_features), gen)
        nn.init.zeros_(lin.bias)
    cells = config.bilstm_cells_per_direction
    for lstm in (model.strength_lstm, model.emotion_lstm):
        for name, p in lstm.named_parameters():
            if name.startswith("weight"):
                _uniform_(p, 1.0 / math.sqrt(cells), gen)
            else:
                nn.init.zeros_(p)
                if name.startswith("bias_ih"):
                    # gate order: input, forget, cell, output
                    with torch.no_grad():
                        p[cells : 2 * cells] = 1.0
    return model.to(dtype)


def compute_loss(pred: Prediction, target_strength, target_emotion, *,
                 use_frame: bool = True, use_cat: bool = True) -> LossBreakdown:
    """Batch-mean losses.

    frame MAE: mean over valid frames of |alpha_f - y|; utterance MAE: |alpha - y|;
    category CE: -sum_k y_k log(theta_k + 1e-12).  A disabled term is reported as 0.
    """
    y = torch.as_tensor(target_strength, dtype=pred.utterance_score.dtype)
    onehot = torch.as_tensor(target_emotion, dtype=pred.emotion_probs.dtype)
    mask = pred.mask
    zero = pred.utterance_score.new_zeros(())
    if use_frame:
        per_utt = (torch.abs(pred.frame_scores - y[:, None]) * mask).sum(dim=1) / mask.sum(dim=1)
        frame_mae = per_utt.mean()
    else:
        frame_mae = zero
    utterance_mae = torch.abs(pred.utterance_score - y).mean()
    if use_cat:
        category_ce = -(onehot * torch.log(pred.emotion_probs + CE_EPS)).sum(dim=1).mean()
    else:
        category_ce = zero
    total = frame_mae + utterance_mae + category_ce
    return LossBreakdown(frame_mae, utterance_mae, category_ce, total)


def backward(model: StrengthNet, mel, lengths, target_strength, target_emotion, *,
             use_frame=True, use_cat=True) -> tuple[dict[str, torch.Tensor], LossBreakdown]:
    """Gradient of the total loss for every named parameter (zeros where a parameter is unused)."""
    pred = model(mel, lengths)
    losses = compute_loss(pred, target_strength, target_emotion, use_frame=use_frame, use_cat=use_cat)
    if not torch.isfinite(losses.total):
        raise NumericalError(f"non-finite loss {losses.total.item()}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(losses.total, params, allow_unused=True)
    out = {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)}
    return out, losses


def collate(mels, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad (T_i, C) arrays to a (B, T_max, C) tensor plus lengths."""
    lengths = torch.tensor([len(m) for m in mels], dtype=torch.long)
    if len(mels) == 0 or int(lengths.min()) < 1:
        raise InvalidInput("cannot batch empty spectrograms")
    batch = torch.zeros((len(mels), int(lengths.max()), mels[0].shape[1]), dtype=dtype)
    for b, m in enumerate(mels):
        batch[b, : len(m)] = torch.as_tensor(np.asarray(m), dtype=dtype)
    return batch, lengths


@torch.no_grad()
def predict(model: StrengthNet, mels, batch_size: int = 64) -> list[dict]:
    """Eval-mode predictions: {'strength', 'frame_scores', 'probs'} per utterance."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for start in range(0, len(mels), batch_size):
            chunk = mels[start : start + batch_size]
            x, lengths = collate(chunk, dtype)
            pred = model(x, lengths)
            for b, n in enumerate(lengths.tolist()):
                out.append({
                    "strength": float(pred.utterance_score[b]),
                    "frame_scores": pred.frame_scores[b, :n].cpu().numpy().astype(np.float64),
                    "probs": pred.emotion_probs[b].cpu().numpy().astype(np.float64),
                })
    finally:
        model.train(was_training)
    return out


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic "STRENGTHNET-CKPT-1" | u32 header_len | header JSON (utf-8)
#   then per tensor, in header["tensors"] order:
#   u16 name_len | name | u8 rank | u32 dims[rank] | float32 data, row-major
# all integers little-endian.


def save_checkpoint(path, model: StrengthNet, metadata: dict | None = None) -> None:
    state = model.state_dict()
    header = {"config": model.config.to_dict(), "tensors": list(state), "metadata": metadata or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, tensor in state.items():
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    tmp.replace(path)


def load_checkpoint(path, dtype=torch.float32) -> tuple[StrengthNet, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise InvalidInput(f"{path}: not a StrengthNet checkpoint")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    state = {}
    for expected in header["tensors"]:
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        if name != expected:
            raise InvalidInput(f"{path}: tensor order mismatch ({name} != {expected})")
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        state[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise InvalidInput(f"{path}: trailing bytes after last tensor")
    config = ModelConfig.from_dict(header["config"])
    model = StrengthNet(config)
    model.load_state_dict(state)
    return model.to(dtype), header.get("metadata", {})
