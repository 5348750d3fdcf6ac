"""Two-stage training of the dual-mode toy system.

Stage 1 trains only the ``new`` parameters (standby embeddings, ``mlp_L``,
temporal attention, ``projector_L``) with standby-only LM inputs. Stage 2
also unfreezes ``lm.*`` and optimises ``0.5 * (standby loss + focus loss)``
with one backward pass. The original encoder stays frozen throughout.

The toy objective is next-token prediction of one caption token per frame,
where the caption is a fixed function of the frame's pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .checkpoint import Checkpoint
from .encoder import EncoderConfig, base_encode, encode, init_base_encoder, init_dual_path
from .lm import BOS, LMConfig, init_lm, lm_forward
from .modes import ModeSelector, assemble, assemble_original
from .numerics import Bound, GradTape, ParameterSet, Tensor, backward, cross_entropy, sgd_step
from .synthetic import caption_matrix, caption_tokens, make_video


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr: float = 0.05
    videos: int = 2
    frames: int = 4
    fps: float = 2.0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Example:
    pixels: list[np.ndarray]
    timestamps: list[float]
    text: np.ndarray  # BOS followed by one caption token per frame


@dataclass
class DualModeModel:
    enc: EncoderConfig
    lm: LMConfig
    params: ParameterSet

    def config_echo(self) -> dict:
        return {"encoder": self.enc.to_dict(), "lm": self.lm.to_dict()}

    def checkpoint(self, **extra) -> Checkpoint:
        return Checkpoint(self.params.copy(), {**self.config_echo(), **extra})


def build_model(enc: EncoderConfig, lm: LMConfig, seed: int = 0) -> DualModeModel:
    if enc.llm_dim != lm.hidden:
        raise ValueError(f"projector width {enc.llm_dim} != LM hidden {lm.hidden}")
    dual = init_dual_path(init_base_encoder(enc, seed), enc, seed + 1)
    params = ParameterSet(list(dual) + list(init_lm(lm, seed + 2)))
    model = DualModeModel(enc, lm, params)
    configure_stage(params, 1)
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> DualModeModel:
    enc = EncoderConfig(**ckpt.config["encoder"])
    lm = LMConfig(**ckpt.config["lm"])
    return DualModeModel(enc, lm, ckpt.params.copy())


def configure_stage(params: ParameterSet, stage: int) -> None:
    if stage == 1:
        params.set_trainable(lambda p: p.group == "new")
    elif stage == 2:
        params.set_trainable(lambda p: p.group == "new" or p.id.startswith("lm."))
    else:
        raise ValueError(f"stage must be 1 or 2, got {stage!r}")


def make_toy_task(enc: EncoderConfig, lm: LMConfig, seed: int = 0, videos: int = 2,
                  frames: int = 4, fps: float = 2.0) -> list[Example]:
    C = caption_matrix(seed + 1000, enc.pixel_dim, lm.vocab)
    out = []
    for v in range(videos):
        px, ts = make_video(seed * 7919 + v, frames, enc.o, enc.pixel_dim, fps=fps)
        out.append(Example(px, ts, np.array([BOS] + caption_tokens(px, C), dtype=np.int64)))
    return out


def example_loss(P: Bound, model: DualModeModel, ex: Example, mode: ModeSelector) -> Tensor:
    frames = encode(ex.pixels, P, model.enc, timestamps=ex.timestamps)
    inp = assemble(mode, frames, ex.text[:-1])
    logits = lm_forward(P, model.lm, inp.embeddings(P), inp.positions)
    return cross_entropy(logits[inp.n_visual:], ex.text[1:])


def batch_loss(P: Bound, model: DualModeModel, batch: list[Example], mode: ModeSelector) -> Tensor:
    if not batch:
        raise ValueError("empty batch")
    total = example_loss(P, model, batch[0], mode)
    for ex in batch[1:]:
        total = total + example_loss(P, model, ex, mode)
    return total * (1.0 / len(batch))


def two_forward_loss(P: Bound, model: DualModeModel, batch: list[Example]):
    l1 = batch_loss(P, model, batch, ModeSelector.STANDBY)
    l2 = batch_loss(P, model, batch, ModeSelector.FOCUS)
    return l1, l2, (l1 + l2) * 0.5


def _apply(model: DualModeModel, grads: dict, lr: float) -> None:
    before = {p.id: p.value for p in model.params if not p.trainable}
    sgd_step(model.params, grads, lr)
    moved = [pid for pid, v in before.items() if model.params[pid].value is not v]
    if moved:
        raise RuntimeError(f"frozen parameters changed: {moved[:5]}")


def stage1_step(model: DualModeModel, batch: list[Example], lr: float) -> float:
    """One gradient step on the standby-mode loss; returns the pre-step loss."""
    with GradTape() as tape:
        loss = batch_loss(model.params.bind(tape), model, batch, ModeSelector.STANDBY)
    _apply(model, backward(tape, loss), lr)
    return loss.item()


def stage2_step(model: DualModeModel, batch: list[Example], lr: float) -> tuple[float, float, float]:
    """Two forward passes, one backward on their mean; returns pre-step (loss1, loss2, combined)."""
    with GradTape() as tape:
        l1, l2, combined = two_forward_loss(model.params.bind(tape), model, batch)
    _apply(model, backward(tape, combined), lr)
    return l1.item(), l2.item(), combined.item()


def stage2_gradients(model: DualModeModel, batch: list[Example]):
    """Gradients of the combined loss and of each pass, from three separate backward passes."""
    out = []
    for pick in (2, 0, 1):
        with GradTape() as tape:
            losses = two_forward_loss(model.params.bind(tape), model, batch)
        out.append(backward(tape, losses[pick]))
    return tuple(out)


def original_path_logits(model: DualModeModel, pixels, text) -> np.ndarray:
    """Focus-mode LM logits with standby tokens excluded: the untouched original system."""
    frames = base_encode(pixels, model.params, model.enc)
    inp = assemble_original(frames, text)
    P = model.params.bind()
    return lm_forward(P, model.lm, inp.embeddings(P), inp.positions).data


def count_changed(before: dict[str, np.ndarray], params: ParameterSet, group: str = "original") -> int:
    """Number of ``group`` parameters whose bytes differ from ``before``."""
    return sum(1 for p in params if p.group == group and p.value.tobytes() != before[p.id].tobytes())


def train(model: DualModeModel, batch: list[Example], stage: int, steps: int, lr: float):
    """Run ``steps`` updates; returns one loss record per step (pre-update values)."""
    configure_stage(model.params, stage)
    history = []
    for _ in range(steps):
        if stage == 1:
            history.append((stage1_step(model, batch, lr),))
        else:
            history.append(stage2_step(model, batch, lr))
    return history


def evaluate(model: DualModeModel, batch: list[Example], mode: ModeSelector) -> float:
    return batch_loss(model.params.bind(), model, batch, mode).item()
