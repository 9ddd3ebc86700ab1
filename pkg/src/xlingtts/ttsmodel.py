"""Multilingual transformer TTS with speaker/language networks and MTL heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelConfig:
    n_phones: int
    n_speakers: int
    n_languages: int
    n_mels: int = 20
    d_enc: int = 64
    d_dec: int = 64
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    d_spk_emb: int = 16
    d_lang_emb: int = 16
    d_prenet: int = 32
    d_mtl_hidden: int = 32
    max_frames: int = 200
    dropout: float = 0.1
    prenet_dropout: float = 0.5
    stop_threshold: float = 0.5

    def __post_init__(self):
        if self.d_enc % self.n_heads or self.d_dec % self.n_heads:
            raise ValueError("d_enc and d_dec must be divisible by n_heads")
        if self.d_spk_emb != self.d_lang_emb:
            raise ValueError("d_spk_emb must equal d_lang_emb")

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})


def model_preset(name: str, **ids) -> ModelConfig:
    """``desk`` (minutes on a CPU) or ``full`` (published model sizes)."""
    if name == "desk":
        return ModelConfig(**ids)
    if name == "full":
        return ModelConfig(d_enc=512, d_dec=768, n_heads=8, n_enc_layers=6, n_dec_layers=6,
                           d_ff=2048, d_spk_emb=128, d_lang_emb=128, d_prenet=256,
                           d_mtl_hidden=256, max_frames=1000, **ids)
    raise ValueError(f"unknown model preset {name!r}")


def sinusoid_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)[:, : dim // 2]
    return pe.float()


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_kv: Optional[int] = None, dropout: float = 0.0):
        super().__init__()
        d_kv = d_kv or d_model
        self.h = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_kv, d_model)
        self.v = nn.Linear(d_kv, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)
        self.weights = None  # last attention map [B, h, Tq, Tk]

    def forward(self, x, mem, mask=None):
        # mask: bool, broadcastable to [B, Tq, Tk], True where attention is allowed
        B, Tq, D = x.shape
        dh = D // self.h
        q = self.q(x).view(B, Tq, self.h, dh).transpose(1, 2)
        k = self.k(mem).view(B, -1, self.h, dh).transpose(1, 2)
        v = self.v(mem).view(B, -1, self.h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None], torch.finfo(scores.dtype).min)
        attn = scores.softmax(-1)
        self.weights = attn
        attn = self.drop(attn)
        return self.o((attn @ v).transpose(1, 2).reshape(B, Tq, D))

    def __getstate__(self):
        # cached maps hold autograd history and cannot be copied or pickled
        state = self.__dict__.copy()
        state["weights"] = None
        return state


class FeedForward(nn.Sequential):
    def __init__(self, d: int, d_ff: int, dropout: float):
        super().__init__(nn.Linear(d, d_ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_ff, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, n_heads, d_ff, dropout):
        super().__init__()
        self.ln1, self.ln2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, dropout=dropout)
        self.ff = FeedForward(d, d_ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d, d_mem, n_heads, d_ff, dropout):
        super().__init__()
        self.ln1, self.ln2, self.ln3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, dropout=dropout)
        self.cross_attn = MultiHeadAttention(d, n_heads, d_kv=d_mem, dropout=dropout)
        self.ff = FeedForward(d, d_ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, self_mask, mem_mask):
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h, self_mask))
        x = x + self.drop(self.cross_attn(self.ln2(x), mem, mem_mask))
        return x + self.drop(self.ff(self.ln3(x)))


class ConditionNet(nn.Module):
    """Lookup table followed by one tanh layer (speaker or language network)."""

    def __init__(self, n: int, d: int):
        super().__init__()
        self.table = nn.Embedding(n, d)
        nn.init.normal_(self.table.weight, std=1.0)
        self.net = nn.Sequential(nn.Linear(d, d), nn.Tanh())

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if int(ids.min()) < 0 or int(ids.max()) >= self.table.num_embeddings:
            raise IndexError(f"id out of range [0, {self.table.num_embeddings}): {ids.tolist()}")
        return self.net(self.table(ids))


class ClassifierHead(nn.Sequential):
    def __init__(self, d_in, d_hidden, n_out):
        super().__init__(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, n_out))


@dataclass
class InferResult:
    mel: torch.Tensor  # [T, n_mels]
    hit_max: bool


def shift_right(mel: torch.Tensor) -> torch.Tensor:
    """Decoder inputs: a zero start frame followed by all but the last target frame."""
    return F.pad(mel, (0, 0, 1, 0))[..., :-1, :]


def length_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    return torch.arange(T, device=lengths.device)[None] < lengths[:, None]


class TtsModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        self.phone_emb = nn.Embedding(c.n_phones, c.d_enc, padding_idx=0)
        nn.init.normal_(self.phone_emb.weight, std=c.d_enc ** -0.5)
        self.register_buffer("pe_enc", sinusoid_table(c.max_frames + 1, c.d_enc), persistent=False)
        self.register_buffer("pe_dec", sinusoid_table(c.max_frames + 1, c.d_dec), persistent=False)
        self.enc_alpha = nn.Parameter(torch.ones(1))
        self.dec_alpha = nn.Parameter(torch.ones(1))
        self.encoder = nn.ModuleList(EncoderLayer(c.d_enc, c.n_heads, c.d_ff, c.dropout)
                                     for _ in range(c.n_enc_layers))
        self.enc_norm = nn.LayerNorm(c.d_enc)

        self.speaker_net = ConditionNet(c.n_speakers, c.d_spk_emb)
        self.language_net = ConditionNet(c.n_languages, c.d_lang_emb)
        self.spk_proj = nn.Linear(c.d_spk_emb, c.d_enc, bias=False)
        self.lang_proj = nn.Linear(c.d_lang_emb, c.d_enc, bias=False)
        self.speaker_head = ClassifierHead(c.d_spk_emb, c.d_mtl_hidden, c.n_speakers)
        self.language_head = ClassifierHead(c.d_lang_emb, c.d_mtl_hidden, c.n_languages)

        self.prenet = nn.Sequential(nn.Linear(c.n_mels, c.d_prenet), nn.ReLU(), nn.Dropout(c.prenet_dropout),
                                    nn.Linear(c.d_prenet, c.d_prenet), nn.ReLU(), nn.Dropout(c.prenet_dropout))
        self.dec_in = nn.Linear(c.d_prenet + c.d_spk_emb, c.d_dec)
        self.decoder = nn.ModuleList(DecoderLayer(c.d_dec, c.d_enc, c.n_heads, c.d_ff, c.dropout)
                                     for _ in range(c.n_dec_layers))
        self.dec_norm = nn.LayerNorm(c.d_dec)
        self.mel_out = nn.Linear(c.d_dec, c.n_mels)
        self.stop_out = nn.Linear(c.d_dec, 1)

    # -- conditioning

    def speaker_network(self, speaker_ids: torch.Tensor) -> torch.Tensor:
        return self.speaker_net(speaker_ids)

    def language_network(self, lang_ids: torch.Tensor) -> torch.Tensor:
        return self.language_net(lang_ids)

    def mtl_heads(self, s_cond, l_cond) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.speaker_head(s_cond), self.language_head(l_cond)

    def condition_injection(self, states, s_cond, l_cond):
        """Add projected speaker and language vectors to every encoder row."""
        return states + (self.spk_proj(s_cond) + self.lang_proj(l_cond)).unsqueeze(-2)

    # -- encoder / decoder

    def encode(self, phones: torch.Tensor, phone_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """phones [B, L] (0 = padding) -> states [B, L, d_enc]."""
        if phones.dim() == 1:
            phones = phones[None]
        if phones.shape[-1] == 0:
            raise ValueError("empty phone sequence")
        if phones.shape[-1] > self.config.max_frames:
            raise ValueError(f"phone sequence longer than max_frames={self.config.max_frames}")
        if phone_mask is None:
            phone_mask = phones != 0
        x = self.phone_emb(phones) + self.enc_alpha * self.pe_enc[: phones.shape[1]]
        mask = phone_mask[:, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x)

    def decode_teacher_forced(self, memory, mel_inputs, s_cond, l_cond=None, memory_mask=None):
        """Parallel decoder pass. mel_inputs [B, T, n_mels] are targets shifted right.

        Returns mel_pred [B, T, n_mels] and stop_logits [B, T]. ``memory`` must
        already carry the conditioning (see :meth:`condition_injection`);
        ``l_cond`` is accepted for signature symmetry.
        """
        B, T, _ = mel_inputs.shape
        if T > self.config.max_frames:
            raise ValueError(f"{T} frames exceeds max_frames={self.config.max_frames}")
        if memory_mask is None:
            memory_mask = torch.ones(B, memory.shape[1], dtype=torch.bool, device=memory.device)
        h = self.prenet(mel_inputs)
        h = torch.cat([h, s_cond[:, None, :].expand(B, T, -1)], dim=-1)
        x = self.dec_in(h) + self.dec_alpha * self.pe_dec[:T]
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()[None]
        mem_mask = memory_mask[:, None, :]
        for layer in self.decoder:
            x = layer(x, memory, causal, mem_mask)
        x = self.dec_norm(x)
        return self.mel_out(x), self.stop_out(x).squeeze(-1)

    def cross_attention_maps(self) -> List[torch.Tensor]:
        """Cross-attention weights of every decoder layer from the last decoder pass."""
        return [layer.cross_attn.weights for layer in self.decoder]

    def forward(self, phones, mel_inputs, speaker_ids, lang_ids, phone_mask=None):
        s_cond = self.speaker_network(speaker_ids)
        l_cond = self.language_network(lang_ids)
        if phone_mask is None:
            phone_mask = phones != 0
        memory = self.condition_injection(self.encode(phones, phone_mask), s_cond, l_cond)
        mel_pred, stop_logits = self.decode_teacher_forced(memory, mel_inputs, s_cond, l_cond, phone_mask)
        spk_logits, lang_logits = self.mtl_heads(s_cond, l_cond)
        return dict(mel_pred=mel_pred, stop_logits=stop_logits, s_cond=s_cond, l_cond=l_cond,
                    spk_logits=spk_logits, lang_logits=lang_logits)

    # -- inference

    @torch.no_grad()
    def infer_batch(self, phones: Sequence[Sequence[int]], speaker_ids: Sequence[int],
                    lang_ids: Sequence[int], max_frames: Optional[int] = None) -> List[InferResult]:
        """Free-running autoregressive synthesis for several utterances at once."""
        max_frames = min(max_frames or self.config.max_frames, self.config.max_frames)
        if max_frames <= 0:
            raise ValueError("max_frames must be positive")
        B = len(phones)
        dev = self.phone_emb.weight.device
        L = max(len(p) for p in phones)
        ph = torch.zeros(B, L, dtype=torch.long, device=dev)
        for i, p in enumerate(phones):
            ph[i, : len(p)] = torch.as_tensor(list(p), dtype=torch.long)
        spk = torch.as_tensor(list(speaker_ids), device=dev)
        lang = torch.as_tensor(list(lang_ids), device=dev)
        s_cond, l_cond = self.speaker_network(spk), self.language_network(lang)
        mask = ph != 0
        memory = self.condition_injection(self.encode(ph, mask), s_cond, l_cond)

        dtype = self.mel_out.weight.dtype
        inputs = torch.zeros(B, 1, self.config.n_mels, dtype=dtype, device=dev)
        lengths = [None] * B
        for t in range(max_frames):
            mel_pred, stop_logits = self.decode_teacher_forced(memory, inputs, s_cond, l_cond, mask)
            stop = torch.sigmoid(stop_logits[:, -1]) > self.config.stop_threshold
            for i in range(B):
                if lengths[i] is None and bool(stop[i]):
                    lengths[i] = t + 1
            if all(n is not None for n in lengths) or t == max_frames - 1:
                break
            inputs = torch.cat([inputs, mel_pred[:, -1:]], dim=1)
        out = []
        for i in range(B):
            n = lengths[i] if lengths[i] is not None else mel_pred.shape[1]
            out.append(InferResult(mel_pred[i, :n].clone(), lengths[i] is None))
        return out

    def infer(self, phones: Sequence[int], speaker_id: int, lang_id: int,
              max_frames: Optional[int] = None) -> InferResult:
        return self.infer_batch([phones], [speaker_id], [lang_id], max_frames)[0]

    # -- speaker extension

    def add_speaker(self) -> int:
        """Append a speaker row (mean of existing rows) to the table and MTL speaker head."""
        old = self.speaker_net.table
        table = nn.Embedding(old.num_embeddings + 1, old.embedding_dim).to(old.weight)
        head_old = self.speaker_head[2]
        head = nn.Linear(head_old.in_features, head_old.out_features + 1).to(head_old.weight)
        with torch.no_grad():
            table.weight[:-1] = old.weight
            table.weight[-1] = old.weight.mean(0)
            head.weight[:-1] = head_old.weight
            head.weight[-1] = head_old.weight.mean(0)
            head.bias[:-1] = head_old.bias
            head.bias[-1] = head_old.bias.mean()
        self.speaker_net.table = table
        self.speaker_head[2] = head
        self.config = self.config.replace(n_speakers=table.num_embeddings)
        return table.num_embeddings - 1
