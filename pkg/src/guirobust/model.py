"""Tiny vision-language grounding model.

A patch transformer encodes the screenshot; a causal text decoder reads
the instruction and the output prefix, cross-attends over the visual
tokens and emits the target location digit by digit, e.g.
``( 0 1 2 , 3 4 5 ) <eos>``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor
from .vocab import Vocabulary, default_vocabulary

MAX_PREFIX = 16


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    output_mode: str = "point"
    max_text: int = 32

    def __post_init__(self):
        if self.output_mode not in ("point", "bbox"):
            raise ValueError(f"output_mode must be point or bbox, got {self.output_mode!r}")
        if self.embed_dim < 8 or self.patch_size < 1 or self.embed_dim % self.heads:
            raise ValueError("embed_dim must be >= 8 and divisible by heads")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for 2-D positional codes")

    @property
    def max_output(self) -> int:
        # "(ddd,ddd)" or "(ddd,ddd,ddd,ddd)" plus <eos>
        return MAX_PREFIX if self.output_mode == "point" else 18

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


_DECIMAL_FREQS = (1.0, 10.0, 0.5, 2.0, 5.0, 20.0, 0.25, 3.0, 50.0, 4.0, 7.0, 15.0, 30.0, 1.5, 40.0, 100.0)


def _frequencies(n: int) -> np.ndarray:
    if n <= len(_DECIMAL_FREQS):
        return np.array(_DECIMAL_FREQS[:n])
    extra = np.geomspace(0.125, 120.0, n - len(_DECIMAL_FREQS))
    return np.concatenate([_DECIMAL_FREQS, extra])


def positional_codes(gh: int, gw: int, patch: int, valid_h: int, valid_w: int, dim: int) -> np.ndarray:
    """Sinusoidal codes of normalized patch centres, shape [gh * gw, dim].

    Frequencies include whole cycles per image of 1, 10, ... so that each
    decimal digit of a coordinate is a linearly separable arc of one phase.
    """
    nf = dim // 4
    omega = 2 * math.pi * _frequencies(nf)
    ys = (np.arange(gh) * patch + patch / 2) / valid_h
    xs = (np.arange(gw) * patch + patch / 2) / valid_w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    ang_x = xx.reshape(-1, 1) * omega
    ang_y = yy.reshape(-1, 1) * omega
    return np.concatenate([np.sin(ang_x), np.cos(ang_x), np.sin(ang_y), np.cos(ang_y)], axis=1)


def _init_params(cfg: ModelConfig, vocab_size: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    hid = d * cfg.mlp_ratio
    pdim = cfg.patch_size * cfg.patch_size * 3
    resid = 1.0 / math.sqrt(2 * (cfg.encoder_layers + cfg.decoder_layers))

    def lin(fan_in, fan_out, scale=1.0):
        return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))

    p: dict[str, np.ndarray] = {
        "patch.w": lin(pdim, d),
        "patch.b": np.zeros(d),
        "patch.ln.g": np.ones(d),
        "patch.ln.b": np.zeros(d),
    }

    def block(prefix):
        p[f"{prefix}.ln1.g"] = np.ones(d)
        p[f"{prefix}.ln1.b"] = np.zeros(d)
        p[f"{prefix}.attn.wq"] = lin(d, d)
        p[f"{prefix}.attn.wk"] = lin(d, d)
        p[f"{prefix}.attn.wv"] = lin(d, d)
        p[f"{prefix}.attn.wo"] = lin(d, d, resid)
        p[f"{prefix}.ln2.g"] = np.ones(d)
        p[f"{prefix}.ln2.b"] = np.zeros(d)
        p[f"{prefix}.mlp.w1"] = lin(d, hid)
        p[f"{prefix}.mlp.b1"] = np.zeros(hid)
        p[f"{prefix}.mlp.w2"] = lin(hid, d, resid)
        p[f"{prefix}.mlp.b2"] = np.zeros(d)

    for i in range(cfg.encoder_layers):
        block(f"enc{i}")
    p["enc.ln.g"] = np.ones(d)
    p["enc.ln.b"] = np.zeros(d)
    p["tok.emb"] = rng.normal(0.0, 0.5, size=(vocab_size, d))
    p["txt.pos"] = rng.normal(0.0, 0.5, size=(cfg.max_text, d))
    for i in range(cfg.decoder_layers):
        block(f"dec{i}")
        p[f"dec{i}.lnx.g"] = np.ones(d)
        p[f"dec{i}.lnx.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv"):
            p[f"dec{i}.xattn.{w}"] = lin(d, d)
        p[f"dec{i}.xattn.wo"] = lin(d, d, resid)
    p["dec.ln.g"] = np.ones(d)
    p["dec.ln.b"] = np.zeros(d)
    p["head.w"] = lin(d, vocab_size)
    p["head.b"] = np.zeros(vocab_size)
    return p


class Grounder:
    """Parameters plus forward passes; all methods are read-only on weights."""

    def __init__(self, config: ModelConfig | None = None, vocab: Vocabulary | None = None,
                 seed: int = 0, dtype=np.float32, params: dict[str, np.ndarray] | None = None):
        self.config = config or ModelConfig()
        self.vocab = vocab or default_vocabulary()
        raw = params if params is not None else _init_params(self.config, len(self.vocab), seed)
        self.params: dict[str, Tensor] = {
            k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True) for k, v in raw.items()
        }
        self.dtype = np.dtype(dtype)
        self._pos_cache: dict = {}

    # ------------------------------------------------------------ utilities

    def astype(self, dtype) -> Grounder:
        return Grounder(self.config, self.vocab, dtype=dtype,
                        params={k: v.data for k, v in self.params.items()})

    def frozen(self) -> Grounder:
        """View sharing the weights but recording no parameter gradients."""
        view = object.__new__(Grounder)
        view.config, view.vocab, view.dtype = self.config, self.vocab, self.dtype
        view.params = {k: Tensor(v.data) for k, v in self.params.items()}
        view._pos_cache = self._pos_cache
        return view

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -------------------------------------------------------------- encoder

    def _prepare(self, image) -> tuple[Tensor, int, int]:
        """Batch-ify and edge-pad so both extents divide the patch size."""
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected H x W x 3 image(s), got shape {x.shape}")
        _, h, w, _ = x.shape
        ps = self.config.patch_size
        ph, pw = (-h) % ps, (-w) % ps
        if ph or pw:
            rows = np.minimum(np.arange(h + ph), h - 1)
            cols = np.minimum(np.arange(w + pw), w - 1)
            x = tc.getitem(x, (slice(None), rows[:, None], cols[None, :]))
        return x, h, w

    def _positions(self, gh, gw, h, w) -> np.ndarray:
        key = (gh, gw, h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_codes(
                gh, gw, self.config.patch_size, h, w, self.config.embed_dim).astype(self.dtype)
        return self._pos_cache[key]

    def _attention(self, prefix: str, x: Tensor, h: int = 1) -> Tensor:
        """Self-attention over ``x`` [B, L, d] with ``h`` heads."""
        b, n, d = x.shape
        dh = d // h
        scale = 1.0 / math.sqrt(dh)
        q = (x @ self._p(f"{prefix}.attn.wq")) * scale
        k = x @ self._p(f"{prefix}.attn.wk")
        v = x @ self._p(f"{prefix}.attn.wv")
        q = q.reshape(b, n, h, dh).transpose(0, 2, 1, 3)
        k = k.reshape(b, n, h, dh).transpose(0, 2, 3, 1)
        v = v.reshape(b, n, h, dh).transpose(0, 2, 1, 3)
        p = tc.softmax(q @ k, axis=-1)
        out = (p @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return out @ self._p(f"{prefix}.attn.wo")

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        hdn = tc.gelu(x @ self._p(f"{prefix}.mlp.w1") + self._p(f"{prefix}.mlp.b1"))
        return hdn @ self._p(f"{prefix}.mlp.w2") + self._p(f"{prefix}.mlp.b2")

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def encode_batch(self, images) -> Tensor:
        """Visual tokens [B, N, d] for images [B, H, W, 3] (or one H x W x 3)."""
        return self.encode_with_positions(images)[0]

    def encode_with_positions(self, images) -> tuple[Tensor, np.ndarray]:
        """Visual tokens plus the [N, d] positional codes of their patches."""
        x, h, w = self._prepare(images)
        b, hp, wp, _ = x.shape
        ps = self.config.patch_size
        gh, gw = hp // ps, wp // ps
        patches = (x.reshape(b, gh, ps, gw, ps, 3)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(b, gh * gw, ps * ps * 3))
        # normalizing patch embeddings keeps small glyphs from being
        # swamped by the positional codes on flat backgrounds
        z = self._ln("patch.ln", patches @ self._p("patch.w") + self._p("patch.b"))
        pos = self._positions(gh, gw, h, w)
        z = z + pos
        for i in range(self.config.encoder_layers):
            z = z + self._attention(f"enc{i}", self._ln(f"enc{i}.ln1", z))
            z = z + self._mlp(f"enc{i}", self._ln(f"enc{i}.ln2", z))
        return self._ln("enc.ln", z), pos

    def encode_image(self, image) -> Tensor:
        """Visual embedding f(s) of one image, shape [patches, d]."""
        z = self.encode_batch(image)
        if z.shape[0] != 1:
            raise ValueError("encode_image takes a single image; use encode_batch")
        return z.reshape(z.shape[1], z.shape[2])

    # -------------------------------------------------------------- decoder

    def memory(self, vis: Tensor, pos: np.ndarray) -> list[tuple[Tensor, Tensor]]:
        """Per-layer keys [B, h, dh, N] and values [B, h, N, dh] over the visual tokens.

        Keys say *what* each patch shows; values say *where* it is (a
        projection of the patch's positional code).
        """
        b, n, d = vis.shape
        h = self.config.heads
        dh = d // h
        where = Tensor(pos.reshape(1, n, d))
        mem = []
        for i in range(self.config.decoder_layers):
            k = (vis @ self._p(f"dec{i}.xattn.wk")).reshape(b, n, h, dh).transpose(0, 2, 3, 1)
            v = (where @ self._p(f"dec{i}.xattn.wv")).reshape(1, n, h, dh).transpose(0, 2, 1, 3)
            mem.append((k, v))
        return mem

    def _self_text(self, i: int, x: Tensor) -> Tensor:
        """Causal self-attention within each text sequence of x [B, T, L, d]."""
        b, t, L, d = x.shape
        h = self.config.heads
        dh = d // h
        pre = f"dec{i}.attn"
        q = ((x @ self._p(f"{pre}.wq")) * (1.0 / math.sqrt(dh))).reshape(b, t, L, h, dh).transpose(0, 1, 3, 2, 4)
        k = (x @ self._p(f"{pre}.wk")).reshape(b, t, L, h, dh).transpose(0, 1, 3, 4, 2)
        v = (x @ self._p(f"{pre}.wv")).reshape(b, t, L, h, dh).transpose(0, 1, 3, 2, 4)
        p = tc.softmax(q @ k, axis=-1, mask=np.tril(np.ones((L, L), bool)))
        out = (p @ v).transpose(0, 1, 3, 2, 4).reshape(b, t, L, d)
        return out @ self._p(f"{pre}.wo")

    def _cross(self, i: int, x: Tensor, mem: tuple[Tensor, Tensor], attn: list | None = None) -> Tensor:
        """Attention of text tokens x [B, T, L, d] over the visual tokens."""
        b, t, L, d = x.shape
        h = self.config.heads
        dh = d // h
        mk, mv = mem
        q = (x @ self._p(f"dec{i}.xattn.wq")) * (1.0 / math.sqrt(dh))
        q = q.reshape(b, t * L, h, dh).transpose(0, 2, 1, 3)
        p = tc.softmax(q @ mk, axis=-1)
        if attn is not None:
            attn.append(p)  # [B, h, T * L, N]
        out = (p @ mv).transpose(0, 2, 1, 3).reshape(b, t, L, d)
        return out @ self._p(f"dec{i}.xattn.wo")

    def decode(self, mem: list[tuple[Tensor, Tensor]], tokens: np.ndarray,
               attn: list | None = None) -> Tensor:
        """Next-token logits [B, T, L, V] for token ids [B, T, L].

        If ``attn`` is a list, each layer's cross-attention weights are
        appended to it.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        b, t, L = tokens.shape
        if L > self.config.max_text:
            raise ValueError(f"text length {L} exceeds max_text {self.config.max_text}")
        x = tc.getitem(self._p("tok.emb"), tokens) + self._p("txt.pos")[:L]
        for i in range(self.config.decoder_layers):
            x = x + self._self_text(i, self._ln(f"dec{i}.ln1", x))
            x = x + self._cross(i, self._ln(f"dec{i}.lnx", x), mem[i], attn)
            x = x + self._mlp(f"dec{i}", self._ln(f"dec{i}.ln2", x))
        x = self._ln("dec.ln", x)
        return x @ self._p("head.w") + self._p("head.b")

    # ----------------------------------------------------------- public API

    def _text(self, instruction, prefix) -> np.ndarray:
        ids = list(instruction) + [self.vocab.bos] + list(prefix)
        return np.asarray(ids, dtype=np.int64)[None, None, :]

    def sequence_logits(self, image, instruction, output_tokens) -> Tensor:
        """Logits [len(output_tokens) + 1, V]; row k predicts output token k."""
        mem = self.memory(*self.encode_with_positions(image))
        logits = self.decode(mem, self._text(instruction, output_tokens))
        start = len(instruction)
        L = logits.shape[2]
        return logits[0, 0, start:L, :]

    def forward_logits(self, image, instruction, prefix) -> Tensor:
        """Next-token logits [V] after ``prefix`` (tokens following <bos>)."""
        if len(prefix) > self.config.max_output:
            raise ValueError(f"prefix length {len(prefix)} exceeds {self.config.max_output}")
        self._check_ids(list(instruction) + list(prefix))
        seq = self.sequence_logits(image, instruction, prefix)
        return seq[seq.shape[0] - 1]

    def lm_loss(self, image, instruction, target_tokens) -> Tensor:
        """Summed cross-entropy of ``target_tokens`` under teacher forcing."""
        target_tokens = list(target_tokens)
        if not target_tokens:
            raise ValueError("target_tokens must be non-empty")
        self._check_ids(list(instruction) + target_tokens)
        seq = self.sequence_logits(image, instruction, target_tokens[:-1])
        return tc.softmax_cross_entropy(seq, np.asarray(target_tokens))

    def _check_ids(self, ids) -> None:
        v = len(self.vocab)
        for i in ids:
            if not 0 <= int(i) < v:
                raise ValueError(f"unknown token id {i}")

    def generate(self, image, instruction):
        """Greedy decode; returns a GroundingPrediction."""
        from .grounding import parse_prediction

        with tc.no_grad():
            mem = self.memory(*self.encode_with_positions(image))
            out: list[int] = []
            for _ in range(self.config.max_output):
                logits = self.decode(mem, self._text(instruction, out)).data[0, 0, -1]
                nxt = int(np.argmax(logits))  # argmax returns the lowest id on ties
                if nxt == self.vocab.eos:
                    break
                out.append(nxt)
        return parse_prediction(self.vocab.decode(out), self.config.output_mode)
