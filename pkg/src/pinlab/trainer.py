"""Optimization of PIN and the PEFT baselines against the frozen VLM.

Owns batch assembly, the Adam loop, method adapters (prompt tokens, visual
prompt tokens, low-rank factors), and binary checkpoint serialization.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import vlm as vlm_mod
from .autodiff import Tensor
from .codec import BBox, GridSpec, Vocabulary, box_to_text, quantize_box
from .pin import PinConfig, PinParams, init_pin, pin_forward, insert
from .scene import read_manifest, read_ppm
from .vlm import VLMConfig, VLMParams, encode_image, fuse, lm_forward, generate_greedy

METHODS = ("pin", "coop", "vpt-encoder", "vpt-fusion", "lora-encoder", "random-box")


@dataclass(frozen=True)
class TrainConfig:
    method: str
    manifest_path: str
    vocab_path: str
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    image_side: int = 64
    grid_n: int = 16
    clip_norm: float | None = 10.0
    pin_d_model: int = 16
    pin_depth: int = 2
    pin_hidden: int = 32
    pin_variant: str = "sinusoidal"
    coop_tokens: int = 16
    vpt_tokens: int = 100
    vpt_site: str = "encoder"
    lora_rank: int = 16
    lora_alpha: int = 16

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.image_side, self.grid_n)


def _uniform(rng, shape, fan_in, dtype=np.float32) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


class Method:
    """A trainable insert around the frozen VLM."""

    name = "base"

    def trainable_named(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.trainable_named()]

    def prefix(self, images: np.ndarray, vlm: VLMParams) -> Tensor:
        return fuse(encode_image(images, vlm), vlm)

    def coop(self) -> Tensor | None:
        return None


class PinMethod(Method):
    name = "pin"

    def __init__(self, pin: PinParams, active: bool = True):
        self.pin = pin
        self.active = active

    def trainable_named(self):
        return [(n, t) for n, t in self.pin.named() if t.requires_grad]

    def prefix(self, images, vlm):
        x_v = encode_image(images, vlm)
        pi = pin_forward(self.pin)
        return fuse(insert(x_v, pi, self.active), vlm)


class CoopMethod(Method):
    name = "coop"

    def __init__(self, tokens: Tensor):
        self.tokens = tokens

    def trainable_named(self):
        return [("coop/tokens", self.tokens)]

    def coop(self):
        return self.tokens


class VptMethod(Method):
    def __init__(self, tokens: Tensor, site: str):
        if site not in ("encoder", "fusion"):
            raise ValueError(f"unknown VPT site {site!r}")
        self.tokens = tokens
        self.site = site
        self.name = f"vpt-{site}"

    def trainable_named(self):
        return [(f"vpt/{self.site}.tokens", self.tokens)]

    def prefix(self, images, vlm):
        if self.site == "encoder":
            x_v = encode_image(images, vlm, vpt_tokens=self.tokens)
            return fuse(x_v, vlm)
        # fusion site: tokens join the fusion input sequence and their
        # outputs are dropped before the prefix is consumed (length N_p)
        x_v = encode_image(images, vlm)
        n_p = x_v.shape[1]
        joined = ad.concat([x_v, vlm_mod.tile_leading(self.tokens, x_v.shape[0])],
                           axis=1)
        fused = fuse(joined, vlm)
        return ad.slice_axis(fused, 1, 0, n_p)


class LoraMethod(Method):
    name = "lora-encoder"

    def __init__(self, factors: dict[str, tuple[Tensor, Tensor]], scaling: float):
        self.factors = factors
        self.scaling = scaling

    def trainable_named(self):
        out = []
        for name in sorted(self.factors):
            a, b = self.factors[name]
            out.append((f"lora/{name}.a", a))
            out.append((f"lora/{name}.b", b))
        return out

    def adapters(self) -> dict:
        return {name: (a, b, self.scaling) for name, (a, b) in self.factors.items()}

    def prefix(self, images, vlm):
        return fuse(encode_image(images, vlm, adapters=self.adapters()), vlm)


def lora_adapted_shapes(config: VLMConfig) -> dict[str, tuple[int, int]]:
    """Every attention and projection weight in the vision encoder."""
    p = config.patch_size * config.patch_size * 3
    d, m = config.d_vision, config.vision_mlp
    shapes = {"patch_w": (p, d)}
    for i in range(vlm_mod.VISION_BLOCKS):
        shapes[f"vis{i}.wq"] = (d, d)
        shapes[f"vis{i}.wk"] = (d, d)
        shapes[f"vis{i}.wv"] = (d, d)
        shapes[f"vis{i}.wo"] = (d, d)
        shapes[f"vis{i}.gate_w"] = (d, m)
        shapes[f"vis{i}.val_w"] = (d, m)
        shapes[f"vis{i}.down_w"] = (m, d)
    return shapes


def lora_param_count(config: VLMConfig, rank: int) -> int:
    return sum(rank * (fi + fo) for fi, fo in lora_adapted_shapes(config).values())


def build_method(cfg: TrainConfig, vlm: VLMParams) -> Method:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xAD)))
    vcfg = vlm.config
    if cfg.method == "pin":
        pin_cfg = PinConfig(out_dim=vcfg.d_vision, d_model=cfg.pin_d_model,
                            depth=cfg.pin_depth, hidden=cfg.pin_hidden,
                            variant=cfg.pin_variant)
        return PinMethod(init_pin(pin_cfg, vcfg.n_patches, cfg.seed))
    if cfg.method == "coop":
        return CoopMethod(_uniform(rng, (cfg.coop_tokens, vcfg.d_text), vcfg.d_text))
    if cfg.method in ("vpt-encoder", "vpt-fusion"):
        site = cfg.method.split("-", 1)[1]
        return VptMethod(_uniform(rng, (cfg.vpt_tokens, vcfg.d_vision),
                                  vcfg.d_vision), site)
    if cfg.method == "lora-encoder":
        factors = {}
        for name, (fi, fo) in lora_adapted_shapes(vcfg).items():
            a = _uniform(rng, (fi, cfg.lora_rank), fi)
            b = Tensor(np.zeros((cfg.lora_rank, fo), dtype=np.float32),
                       requires_grad=True)
            factors[name] = (a, b)
        return LoraMethod(factors, cfg.lora_alpha / cfg.lora_rank)
    raise ValueError(f"method {cfg.method!r} is not trainable "
                     "(random-box is an evaluation-only baseline)")


# --- data --------------------------------------------------------------

class TrainingData:
    """Manifest records with images and token sequences resident in memory."""

    def __init__(self, manifest_path: str, vocab: Vocabulary):
        self.records = read_manifest(manifest_path)
        if not self.records:
            raise ValueError(f"empty manifest {manifest_path}")
        self.images = np.stack([read_ppm(r.image_path) for r in self.records])
        self.encoded = [vlm_mod.encode_example(vocab, r.prompt, r.answer)
                        for r in self.records]
        self.vocab = vocab

    def batch(self, indices: np.ndarray):
        seqs = [self.encoded[i][0] for i in indices]
        starts = [self.encoded[i][1] for i in indices]
        inputs, targets, mask = vlm_mod.pad_batch(seqs, starts, self.vocab.pad_id)
        return self.images[indices], inputs, targets, mask


def method_loss(method: Method, images: np.ndarray, inputs: np.ndarray,
                targets: np.ndarray, mask: np.ndarray, vlm: VLMParams) -> Tensor:
    """Answer-token cross entropy through the frozen VLM plus the insert."""
    prefix = method.prefix(images, vlm)
    logits = lm_forward(prefix, inputs, vlm, coop_tokens=method.coop())
    return ad.softmax_cross_entropy(logits, targets, mask)


def pin_loss(batch, vlm: VLMParams, pin: PinParams) -> Tensor:
    """Eq.-style objective for the positional insert on a prepared batch."""
    images, inputs, targets, mask = batch
    return method_loss(PinMethod(pin), images, inputs, targets, mask, vlm)


@dataclass
class TrainResult:
    checkpoint: "Checkpoint"
    losses: list[float]
    clip_events: list[int]


def train(vlm: VLMParams, cfg: TrainConfig, vocab: Vocabulary | None = None,
          resume: "Checkpoint | None" = None) -> TrainResult:
    """Run cfg.steps of Adam on the method's parameters only."""
    if not vlm.frozen:
        raise ValueError("train() requires a frozen VLM")
    fp_before = vlm.fingerprint
    if vocab is None:
        vocab = Vocabulary.load(cfg.vocab_path, cfg.grid)
    data = TrainingData(cfg.manifest_path, vocab)

    if resume is not None:
        method = resume.method
        state = resume.adam
        start_step = resume.step
        losses: list[float] = []
    else:
        method = build_method(cfg, vlm)
        state = ad.adam_init(method.trainable(), lr=cfg.lr)
        start_step = 0
        losses = []

    params = method.trainable()
    clip_events: list[int] = []
    for step in range(start_step, cfg.steps):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, step, 0x7E)))
        idx = rng.integers(0, len(data.records), size=cfg.batch_size)
        images, inputs, targets, mask = data.batch(idx)
        loss = method_loss(method, images, inputs, targets, mask, vlm)
        value = loss.item()
        if not np.isfinite(value):
            raise ad.NonFiniteError(f"non-finite loss at step {step}")
        for t in params:
            t.zero_grad()
        loss.backward()
        if cfg.clip_norm is not None and ad.clip_gradients(params, cfg.clip_norm):
            clip_events.append(step)
        ad.adam_step(params, state)
        losses.append(value)

    if vlm.current_fingerprint() != fp_before:
        raise RuntimeError("frozen VLM fingerprint changed during training")
    ckpt = Checkpoint(vlm=vlm, method=method, adam=state, step=cfg.steps,
                      config=cfg)
    return TrainResult(checkpoint=ckpt, losses=losses, clip_events=clip_events)


def random_box(grid: GridSpec, rng: np.random.Generator) -> BBox:
    """Uniformly random grid-aligned valid box."""
    values = grid.values()
    x0, x1 = sorted(rng.choice(len(values), size=2, replace=False))
    y0, y1 = sorted(rng.choice(len(values), size=2, replace=False))
    return BBox(values[x0], values[y0], values[x1], values[y1], quantized=True)


# --- prediction --------------------------------------------------------

def make_predictor(vlm: VLMParams, vocab: Vocabulary, grid: GridSpec,
                   method: Method | str | None = None, seed: int = 0,
                   max_new: int = 12):
    """Build a (record, image) -> answer-text callable for evaluation.

    `method` may be a trained Method, None (raw frozen model), "random"
    (grid-aligned random boxes), or "oracle" (echo of the quantized GT box).
    """
    if method == "random":
        def predict_random(record, image):
            rng = np.random.default_rng(np.random.SeedSequence((seed, record.seed)))
            return box_to_text(random_box(grid, rng))
        return predict_random
    if method == "oracle":
        def predict_oracle(record, image):
            return box_to_text(quantize_box(record.target_box, grid))
        return predict_oracle

    def predict_model(record, image):
        if method is None:
            prefix = fuse(encode_image(image[None], vlm), vlm)
            coop = None
        else:
            prefix = method.prefix(image[None], vlm)
            coop = method.coop()
        prompt_ids = [vocab.bos_id] + vocab.tokenize(record.prompt)
        out = generate_greedy(prefix, prompt_ids, vlm, vocab.eos_id,
                              max_new=max_new, coop_tokens=coop)
        return vocab.detokenize(out)
    return predict_model


# --- checkpoint serialization -----------------------------------------

MAGIC = b"PINCKPT1"


class CheckpointError(RuntimeError):
    pass


def _pack_container(header_lines: list[str],
                    sections: list[tuple[str, np.ndarray]]) -> bytes:
    """Magic, length-prefixed header, named f32-LE sections, trailing u64 hash."""
    header = "\n".join(header_lines).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(header))
    blob += header
    blob += struct.pack("<I", len(sections))
    for name, arr in sections:
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()[:8]
    return bytes(blob)


def _unpack_container(path: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic / unsupported version")
    payload, digest = blob[:-8], blob[-8:]
    if hashlib.sha256(payload).digest()[:8] != digest:
        raise CheckpointError(f"{path}: payload hash mismatch (corruption)")
    off = 8
    (hlen,) = struct.unpack_from("<I", payload, off)
    off += 4
    header = {}
    for line in payload[off:off + hlen].decode("utf-8").split("\n"):
        if line:
            k, _, v = line.partition("=")
            header[k] = v
    off += hlen
    if header.get("format") != "1":
        raise CheckpointError(f"{path}: unsupported format {header.get('format')}")
    (n_sections,) = struct.unpack_from("<I", payload, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        (nlen,) = struct.unpack_from("<I", payload, off)
        off += 4
        name = payload[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", payload, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        off += 4 * count
        arrays[name] = arr.reshape(shape).copy()
    return header, arrays


def _vlm_header_lines(vlm: VLMParams) -> list[str]:
    lines = [f"vlm_fingerprint={vlm.fingerprint}"]
    for k in ("vocab_size", "image_side", "patch_size", "d_vision", "d_text",
              "n_layers", "n_heads", "max_text_len"):
        lines.append(f"vlm.{k}={getattr(vlm.config, k)}")
    return lines


def _vlm_from_container(path: str, header: dict[str, str],
                        arrays: dict[str, np.ndarray]) -> VLMParams:
    vcfg = VLMConfig(**{k: int(header[f"vlm.{k}"]) for k in
                        ("vocab_size", "image_side", "patch_size", "d_vision",
                         "d_text", "n_layers", "n_heads", "max_text_len")})
    vlm = vlm_mod.init_vlm(vcfg, seed=0)
    for name, t in vlm.named():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing section {name}")
        t.data[...] = arrays[name]
    vlm.freeze()
    if vlm.fingerprint != header["vlm_fingerprint"]:
        raise CheckpointError(f"{path}: VLM fingerprint mismatch (corruption)")
    return vlm


def save_vlm(vlm: VLMParams, path: str) -> None:
    """Persist a frozen VLM on its own (pretraining output)."""
    if not vlm.frozen:
        raise ValueError("save_vlm expects a frozen VLM")
    lines = ["format=1", "kind=vlm"] + _vlm_header_lines(vlm)
    with open(path, "wb") as fh:
        fh.write(_pack_container(lines, [(n, t.data) for n, t in vlm.named()]))


def load_vlm(path: str) -> VLMParams:
    header, arrays = _unpack_container(path)
    if header.get("kind") != "vlm":
        raise CheckpointError(f"{path}: not a frozen-VLM checkpoint")
    return _vlm_from_container(path, header, arrays)


@dataclass
class Checkpoint:
    vlm: VLMParams
    method: Method
    adam: ad.AdamState
    step: int
    config: TrainConfig

    def to_bytes(self) -> bytes:
        lines = ["format=1", "kind=train", f"method={self.config.method}",
                 f"step={self.step}", f"adam_t={self.adam.step_count}"]
        lines += _vlm_header_lines(self.vlm)
        for k, v in asdict(self.config).items():
            lines.append(f"train.{k}={v!r}")
        sections = [(n, t.data) for n, t in self.vlm.named()]
        sections += [(f"method/{n}", t.data)
                     for n, t in self.method.trainable_named()]
        for i, m in enumerate(self.adam.first_moment):
            sections.append((f"adam/m{i}", m))
        for i, v in enumerate(self.adam.second_moment):
            sections.append((f"adam/v{i}", v))
        return _pack_container(lines, sections)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def load_checkpoint(path: str) -> Checkpoint:
    """Bit-exact load with version, payload-hash, and fingerprint validation."""
    import ast

    header, arrays = _unpack_container(path)
    if header.get("kind") != "train":
        raise CheckpointError(f"{path}: not a training checkpoint")
    train_kwargs = {}
    for k, v in header.items():
        if k.startswith("train."):
            train_kwargs[k[len("train."):]] = ast.literal_eval(v)
    cfg = TrainConfig(**train_kwargs)
    vlm = _vlm_from_container(path, header, arrays)
    method = build_method(cfg, vlm)
    for name, t in method.trainable_named():
        key = f"method/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing section {key}")
        t.data[...] = arrays[key]
    params = method.trainable()
    adam = ad.adam_init(params, lr=cfg.lr)
    adam.step_count = int(header["adam_t"])
    for i in range(len(params)):
        adam.first_moment[i][...] = arrays[f"adam/m{i}"]
        adam.second_moment[i][...] = arrays[f"adam/v{i}"]
    return Checkpoint(vlm=vlm, method=method, adam=adam,
                      step=int(header["step"]), config=cfg)
