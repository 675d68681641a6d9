"""Miniature caption-pretrained vision-language model.

Patch encoder with learned positional table, per-token linear fusion into a
causal decoder with rotary positions and a prefix-visible attention mask.
After caption pretraining every parameter is frozen and fingerprinted; all
later adaptation (PIN, prompt tokens, LoRA) happens around these weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VISION_BLOCKS = 2


@dataclass(frozen=True)
class VLMConfig:
    vocab_size: int
    image_side: int = 64
    patch_size: int = 8
    d_vision: int = 32
    d_text: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_text_len: int = 32

    def __post_init__(self):
        if self.image_side % self.patch_size != 0:
            raise ValueError("image_side must be divisible by patch_size")
        if self.d_text % self.n_heads or self.d_vision % self.n_heads:
            raise ValueError("widths must be divisible by n_heads")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def max_seq_len(self) -> int:
        return self.n_patches + self.max_text_len

    @property
    def vision_mlp(self) -> int:
        return 4 * self.d_vision

    @property
    def dec_mlp(self) -> int:
        return 2 * self.d_text


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    gate_w: Tensor
    val_w: Tensor
    down_w: Tensor
    down_b: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{name}", getattr(self, name))
                for name in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                             "ln2_g", "ln2_b", "gate_w", "val_w",
                             "down_w", "down_b")]


@dataclass
class VLMParams:
    config: VLMConfig
    patch_w: Tensor
    patch_b: Tensor
    vis_pos: Tensor
    vis_blocks: list[BlockParams]
    fuse_w: Tensor
    fuse_b: Tensor
    tok_emb: Tensor  # output head is tied to this table
    dec_blocks: list[BlockParams]
    final_g: Tensor
    final_b: Tensor
    frozen: bool = False
    fingerprint: str | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("vlm/patch_w", self.patch_w), ("vlm/patch_b", self.patch_b),
               ("vlm/vis_pos", self.vis_pos)]
        for i, b in enumerate(self.vis_blocks):
            out += b.named(f"vlm/vis{i}")
        out += [("vlm/fuse_w", self.fuse_w), ("vlm/fuse_b", self.fuse_b),
                ("vlm/tok_emb", self.tok_emb)]
        for i, b in enumerate(self.dec_blocks):
            out += b.named(f"vlm/dec{i}")
        out += [("vlm/final_g", self.final_g), ("vlm/final_b", self.final_b)]
        return out

    def all_tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def freeze(self) -> None:
        for t in self.all_tensors():
            t.freeze()
        self.frozen = True
        self.fingerprint = ad.fingerprint(self.named())

    def current_fingerprint(self) -> str:
        return ad.fingerprint(self.named())


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


def _init_block(rng, d: int, mlp: int, dtype) -> BlockParams:
    return BlockParams(
        ln1_g=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln1_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        wq=_uniform(rng, (d, d), d, dtype),
        wk=_uniform(rng, (d, d), d, dtype),
        wv=_uniform(rng, (d, d), d, dtype),
        wo=_uniform(rng, (d, d), d, dtype),
        ln2_g=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln2_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        gate_w=_uniform(rng, (d, mlp), d, dtype),
        val_w=_uniform(rng, (d, mlp), d, dtype),
        down_w=_uniform(rng, (mlp, d), mlp, dtype),
        down_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )


def init_vlm(config: VLMConfig, seed: int, dtype=np.float32) -> VLMParams:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x71A)))
    p = config.patch_size * config.patch_size * 3
    return VLMParams(
        config=config,
        patch_w=_uniform(rng, (p, config.d_vision), p, dtype),
        patch_b=Tensor(np.zeros(config.d_vision, dtype=dtype), requires_grad=True),
        vis_pos=_uniform(rng, (config.n_patches, config.d_vision),
                         config.d_vision, dtype),
        vis_blocks=[_init_block(rng, config.d_vision, config.vision_mlp, dtype)
                    for _ in range(VISION_BLOCKS)],
        fuse_w=_uniform(rng, (config.d_vision, config.d_text), config.d_vision, dtype),
        fuse_b=Tensor(np.zeros(config.d_text, dtype=dtype), requires_grad=True),
        tok_emb=_uniform(rng, (config.vocab_size, config.d_text), config.d_text, dtype),
        dec_blocks=[_init_block(rng, config.d_text, config.dec_mlp, dtype)
                    for _ in range(config.n_layers)],
        final_g=Tensor(np.ones(config.d_text, dtype=dtype), requires_grad=True),
        final_b=Tensor(np.zeros(config.d_text, dtype=dtype), requires_grad=True),
    )


# --- forward pieces ----------------------------------------------------

def _mm(x: Tensor, w: Tensor, adapters: dict | None, name: str) -> Tensor:
    """Matmul with an optional low-rank additive adapter on the weight."""
    out = ad.matmul(x, w)
    if adapters and name in adapters:
        a, b, scaling = adapters[name]
        out = ad.add(out, ad.scale(ad.matmul(ad.matmul(x, a), b), scaling))
    return out


def tile_leading(t: Tensor, batch: int) -> Tensor:
    """Broadcast a tensor over a new leading batch axis (grad sums back)."""
    data = np.broadcast_to(t.data[None], (batch,) + t.shape).copy()
    out = Tensor(data, requires_grad=t.requires_grad, _parents=(t,))

    def backward(g):
        if t.requires_grad:
            t._accumulate(g.sum(axis=0))

    out._backward = backward
    return out


_MASK_CACHE: dict = {}
_ROPE_CACHE: dict = {}


def _prefix_causal_mask(prefix_len: int, total_len: int, dtype) -> np.ndarray:
    key = (prefix_len, total_len, np.dtype(dtype).name)
    if key not in _MASK_CACHE:
        idx = np.arange(total_len)
        allow = (idx[None, :] < prefix_len) | (idx[None, :] <= idx[:, None])
        _MASK_CACHE[key] = np.where(allow, 0.0, -1e9).astype(dtype)
    return _MASK_CACHE[key]


def _rope_tables(total_len: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (total_len, head_dim, np.dtype(dtype).name)
    if key not in _ROPE_CACHE:
        half = head_dim // 2
        inv = 1.0 / np.power(10000.0, np.arange(half) * 2.0 / head_dim)
        ang = np.arange(total_len)[:, None] * inv[None, :]
        cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1).astype(dtype)
        sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1).astype(dtype)
        _ROPE_CACHE[key] = (cos, sin)
    return _ROPE_CACHE[key]


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position rotation; cos/sin are gradient-free constants."""
    out = Tensor(x.data * cos + _rotate_half(x.data) * sin,
                 requires_grad=x.requires_grad, _parents=(x,))

    def backward(g):
        if x.requires_grad:
            gs = g * sin
            half = gs.shape[-1] // 2
            inv = np.concatenate([gs[..., half:], -gs[..., :half]], axis=-1)
            x._accumulate(g * cos + inv, owned=True)

    out._backward = backward
    return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, T, D] -> [B, h, T, D/h] as one materialized op."""
    b, t, d = x.shape
    hd = d // n_heads
    data = np.ascontiguousarray(
        x.data.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3))
    out = Tensor(data, requires_grad=x.requires_grad, _parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.ascontiguousarray(
                g.transpose(0, 2, 1, 3)).reshape(b, t, d), owned=True)

    out._backward = backward
    return out


def _merge_heads(x: Tensor) -> Tensor:
    """[B, h, T, hd] -> [B, T, h*hd] as one materialized op."""
    b, h, t, hd = x.shape
    data = np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(b, t, h * hd)
    out = Tensor(data, requires_grad=x.requires_grad, _parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.ascontiguousarray(
                g.reshape(b, t, h, hd).transpose(0, 2, 1, 3)), owned=True)

    out._backward = backward
    return out


def _block_forward(x: Tensor, blk: BlockParams, n_heads: int,
                   mask: np.ndarray | None = None, rope: tuple | None = None,
                   adapters: dict | None = None, name: str = "") -> Tensor:
    normed = ad.layer_norm(x, blk.ln1_g, blk.ln1_b)
    q = _split_heads(_mm(normed, blk.wq, adapters, f"{name}.wq"), n_heads)
    k = _split_heads(_mm(normed, blk.wk, adapters, f"{name}.wk"), n_heads)
    v = _split_heads(_mm(normed, blk.wv, adapters, f"{name}.wv"), n_heads)
    if rope is not None:
        q = _apply_rope(q, *rope)
        k = _apply_rope(k, *rope)
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    attn = ad.softmax_last(scores, additive=mask)
    context = _merge_heads(ad.matmul(attn, v))
    x = ad.add(x, _mm(context, blk.wo, adapters, f"{name}.wo"))
    normed = ad.layer_norm(x, blk.ln2_g, blk.ln2_b)
    hidden = ad.mul(ad.silu(_mm(normed, blk.gate_w, adapters, f"{name}.gate_w")),
                    _mm(normed, blk.val_w, adapters, f"{name}.val_w"))
    down = ad.add(_mm(hidden, blk.down_w, adapters, f"{name}.down_w"), blk.down_b)
    return ad.add(x, down)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """uint8 [B, H, W, 3] -> float32 [B, n_patches, patch*patch*3] in [-1, 1]."""
    if images.ndim == 3:
        images = images[None]
    b, h, w, _ = images.shape
    g = h // patch_size
    x = images.astype(np.float32) / 127.5 - 1.0
    x = x.reshape(b, g, patch_size, g, patch_size, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, patch_size * patch_size * 3)
    return x


def encode_image(images: np.ndarray, params: VLMParams,
                 vpt_tokens: Tensor | None = None,
                 adapters: dict | None = None) -> Tensor:
    """Patch projection + positional table + transformer blocks -> [B, N_p, D_v]."""
    cfg = params.config
    if images.ndim == 3:
        images = images[None]
    if images.shape[1] != cfg.image_side or images.shape[2] != cfg.image_side:
        raise ValueError(f"image size {images.shape[1:3]} != {cfg.image_side}")
    flat = patchify(images, cfg.patch_size).astype(params.patch_w.dtype)
    x = ad.add(_mm(Tensor(flat), params.patch_w, adapters, "patch_w"), params.patch_b)
    x = ad.add(x, params.vis_pos)
    n_p = cfg.n_patches
    if vpt_tokens is not None:
        x = ad.concat([x, tile_leading(vpt_tokens, x.shape[0])], axis=1)
    for i, blk in enumerate(params.vis_blocks):
        x = _block_forward(x, blk, cfg.n_heads, adapters=adapters, name=f"vis{i}")
    if vpt_tokens is not None:
        x = ad.slice_axis(x, 1, 0, n_p)
    return x


def fuse(x_v: Tensor, params: VLMParams) -> Tensor:
    """Per-token linear projection into decoder width."""
    return ad.add(ad.matmul(x_v, params.fuse_w), params.fuse_b)


def lm_forward(prefix: Tensor, ids: np.ndarray, params: VLMParams,
               coop_tokens: Tensor | None = None) -> Tensor:
    """Causal decoding over [prefix || coop? || embedded text] -> text logits.

    The prefix is fully visible to every text position; text attends causally.
    Returns logits for the text positions only, shape [B, T, V].
    """
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    b, t = ids.shape
    emb = ad.embedding_lookup(params.tok_emb, ids)
    parts = [prefix]
    prefix_len = prefix.shape[1]
    if coop_tokens is not None:
        parts.append(tile_leading(coop_tokens, b))
        prefix_len += coop_tokens.shape[0]
    parts.append(emb)
    x = ad.concat(parts, axis=1)
    total = x.shape[1]
    if t > cfg.max_text_len or total > prefix_len + cfg.max_text_len:
        raise ValueError(f"sequence length {total} exceeds budget")
    mask = _prefix_causal_mask(prefix_len, total, x.dtype)
    rope = _rope_tables(total, cfg.d_text // cfg.n_heads, x.dtype)
    for blk in params.dec_blocks:
        x = _block_forward(x, blk, cfg.n_heads, mask=mask, rope=rope)
    x = ad.layer_norm(x, params.final_g, params.final_b)
    text = ad.slice_axis(x, 1, total - t, total)
    return ad.matmul(text, ad.swap_last(params.tok_emb))


def generate_greedy(prefix: Tensor, prompt_ids: list[int], params: VLMParams,
                    eos_id: int, max_new: int = 12,
                    coop_tokens: Tensor | None = None) -> list[int]:
    """Deterministic argmax decoding until <eos> or max_new tokens."""
    seq = list(prompt_ids)
    out: list[int] = []
    for _ in range(max_new):
        logits = lm_forward(prefix, np.asarray([seq]), params,
                            coop_tokens=coop_tokens)
        nxt = int(np.argmax(logits.data[0, -1]))
        if nxt == eos_id:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


# --- sequence building -------------------------------------------------

def encode_example(vocab, prompt: str, answer: str) -> tuple[np.ndarray, int]:
    """Token ids [bos, prompt..., answer..., eos] and the answer start offset."""
    p = vocab.tokenize(prompt) if prompt else []
    a = vocab.tokenize(answer)
    ids = np.asarray([vocab.bos_id] + p + a + [vocab.eos_id], dtype=np.int64)
    return ids, 1 + len(p)


def pad_batch(sequences: list[np.ndarray], answer_starts: list[int],
              pad_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Next-token training arrays: inputs, targets, and answer-only loss mask."""
    max_len = max(len(s) for s in sequences)
    b = len(sequences)
    inputs = np.full((b, max_len - 1), pad_id, dtype=np.int64)
    targets = np.full((b, max_len - 1), pad_id, dtype=np.int64)
    mask = np.zeros((b, max_len - 1), dtype=bool)
    for i, (seq, start) in enumerate(zip(sequences, answer_starts)):
        n = len(seq)
        inputs[i, :n - 1] = seq[:-1]
        targets[i, :n - 1] = seq[1:]
        # target position j predicts seq[j+1]; answer tokens and <eos> count
        mask[i, start - 1:n - 1] = True
    return inputs, targets, mask


def caption_loss(images: np.ndarray, inputs: np.ndarray, targets: np.ndarray,
                 mask: np.ndarray, params: VLMParams) -> Tensor:
    prefix = fuse(encode_image(images, params), params)
    logits = lm_forward(prefix, inputs, params)
    return ad.softmax_cross_entropy(logits, targets, mask)


def pretrain_captions(records, vocab, config: VLMConfig, seed: int,
                      steps: int = 5000, batch_size: int = 32,
                      lr: float = 1e-3):
    """Train all VLM parameters on location-free captions, then freeze.

    Returns (params, losses). Raises on non-finite loss.
    """
    from .scene import read_ppm

    params = init_vlm(config, seed)
    images = np.stack([read_ppm(r.image_path) for r in records])
    encoded = [encode_example(vocab, r.prompt, r.answer) for r in records]
    trainable = params.all_tensors()
    state = ad.adam_init(trainable, lr=lr)
    losses = []
    for step in range(steps):
        rng = np.random.default_rng(np.random.SeedSequence((seed, step, 0xCA)))
        idx = rng.integers(0, len(records), size=batch_size)
        seqs = [encoded[i][0] for i in idx]
        starts = [encoded[i][1] for i in idx]
        inputs, targets, mask = pad_batch(seqs, starts, vocab.pad_id)
        loss = caption_loss(images[idx], inputs, targets, mask, params)
        for t in trainable:
            t.zero_grad()
        loss.backward()
        ad.adam_step(trainable, state)
        losses.append(loss.item())
    params.freeze()
    return params, losses


def caption_accuracy(params: VLMParams, vocab, records) -> float:
    """Fraction of scenes where greedy captioning names the target category."""
    from .scene import read_ppm

    hits = 0
    prompt_ids = [vocab.bos_id] + vocab.tokenize("a photo of a")
    for r in records:
        prefix = fuse(encode_image(read_ppm(r.image_path), params), params)
        out = generate_greedy(prefix, prompt_ids, params, vocab.eos_id, max_new=4)
        if vocab.index[r.target_category] in out:
            hits += 1
    return hits / len(records)


def interpolate_pos_embeddings(params: VLMParams, factor: int):
    """Bilinear upsizing of the vision positional grid for a larger image side.

    Returns (new_config, new_params); every other weight is value-identical.
    The new parameter set is frozen iff the source was frozen.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    cfg = params.config
    g = cfg.grid_side
    table = params.vis_pos.data.reshape(g, g, cfg.d_vision)
    if factor == 1:
        new_table = table.copy()
    else:
        out_side = g * factor
        # align-corners sampling keeps the four corner embeddings exact
        coords = np.linspace(0.0, g - 1.0, out_side)
        lo = np.floor(coords).astype(int)
        hi = np.minimum(lo + 1, g - 1)
        frac = (coords - lo)
        rows = (table[lo][:, :, :] * (1 - frac)[:, None, None]
                + table[hi][:, :, :] * frac[:, None, None])
        new_table = (rows[:, lo, :] * (1 - frac)[None, :, None]
                     + rows[:, hi, :] * frac[None, :, None])
        new_table = new_table.reshape(out_side * out_side, cfg.d_vision)
    new_cfg = VLMConfig(
        vocab_size=cfg.vocab_size, image_side=cfg.image_side * factor,
        patch_size=cfg.patch_size, d_vision=cfg.d_vision, d_text=cfg.d_text,
        n_layers=cfg.n_layers, n_heads=cfg.n_heads,
        max_text_len=cfg.max_text_len)

    def clone(t: Tensor) -> Tensor:
        c = Tensor(t.data.copy(), requires_grad=False)
        return c

    new = VLMParams(
        config=new_cfg,
        patch_w=clone(params.patch_w), patch_b=clone(params.patch_b),
        vis_pos=Tensor(new_table.reshape(new_cfg.n_patches, cfg.d_vision)
                       .astype(params.vis_pos.dtype)),
        vis_blocks=[BlockParams(**{k: clone(getattr(b, k)) for k in
                                   ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                                    "ln2_g", "ln2_b", "gate_w", "val_w",
                                    "down_w", "down_b")})
                    for b in params.vis_blocks],
        fuse_w=clone(params.fuse_w), fuse_b=clone(params.fuse_b),
        tok_emb=clone(params.tok_emb),
        dec_blocks=[BlockParams(**{k: clone(getattr(b, k)) for k in
                                   ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                                    "ln2_g", "ln2_b", "gate_w", "val_w",
                                    "down_w", "down_b")})
                    for b in params.dec_blocks],
        final_g=clone(params.final_g), final_b=clone(params.final_b),
    )
    if params.frozen:
        new.freeze()
    return new_cfg, new
