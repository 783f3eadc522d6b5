"""Adam, the deterministic training loop, and checkpoint round-tripping.

Checkpoints are canonical JSON (sorted keys, no whitespace) so that
save -> load -> save reproduces the file byte for byte; Python float
repr round-trips doubles exactly, which makes that hold for weights and
moments too.
"""

import dataclasses
import json

import numpy as np

from .errors import CheckpointError, ContractError, SegmentationOverflowError
from .model import CrossModalModel, ModelConfig
from .rng import Rng, derive_seed
from .tensor import Tensor, backward, tape, zero_grads

TRAINABLE_KINDS = ("matching", "vqa")
CHECKPOINT_VERSION = 1
# fixed stream index separating the training-time PRNG from data seeds
_TRAIN_STREAM = 0x7E577E57


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        """Bias-corrected update; a missing grad counts as zero."""
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "m": {k: a.ravel().tolist() for k, a in self.m.items()},
            "v": {k: a.ravel().tolist() for k, a in self.v.items()},
        }

    @classmethod
    def from_state(cls, params: dict[str, Tensor], state: dict) -> "Adam":
        opt = cls(params, lr=state["lr"], beta1=state["beta1"],
                  beta2=state["beta2"], eps=state["eps"])
        opt.step_count = int(state["step_count"])
        for table, store in (("m", opt.m), ("v", opt.v)):
            saved = state[table]
            if set(saved) != set(store):
                raise CheckpointError("optimizer state does not cover the model's parameters")
            for k in store:
                arr = np.array(saved[k], dtype=np.float64)
                if arr.size != store[k].size:
                    raise CheckpointError(f"moment {table}[{k}] has {arr.size} values, expected {store[k].size}")
                store[k] = arr.reshape(store[k].shape)
        return opt


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def train_rng(config: ModelConfig) -> Rng:
    return Rng(derive_seed(config.seed, _TRAIN_STREAM))


def _sample_batch(rng: Rng, pool: list, batch_size: int) -> list:
    """Distinct items when the pool allows it, with replacement otherwise."""
    n = len(pool)
    if n >= batch_size:
        idx = list(range(n))
        for i in range(batch_size):  # partial Fisher-Yates
            j = i + rng.randint(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return [pool[i] for i in idx[:batch_size]]
    return [pool[rng.randint(n)] for _ in range(batch_size)]


def train(model: CrossModalModel, items: list, steps: int, *,
          batch_size: int = 16, lr: float = 1e-3, opt: Adam | None = None,
          rng: Rng | None = None, start_step: int = 0,
          log_path: str | None = None) -> dict:
    """Round-robin over the trainable kinds present in `items`, one
    same-kind batch per step. A segmentation overflow skips the step
    with a logged record instead of crashing. Returns a summary with the
    per-step losses; per-step JSONL goes to `log_path` when given."""
    if steps < 0:
        raise ContractError("steps must be nonnegative")
    pools = {k: [it for it in items if it.kind == k] for k in TRAINABLE_KINDS}
    pools = {k: v for k, v in pools.items() if v}
    if steps > 0 and not pools:
        raise ContractError("dataset holds no trainable items (matching or vqa)")
    kinds = sorted(pools)
    params = model.named_parameters()
    if opt is None:
        opt = Adam(params, lr=lr)
    if rng is None:
        rng = train_rng(model.config)

    log_f = open(log_path, "a") if log_path else None
    losses: list[float] = []
    skipped = 0
    try:
        for step in range(start_step, start_step + steps):
            kind = kinds[step % len(kinds)]
            batch = _sample_batch(rng, pools[kind], batch_size)
            try:
                with tape():
                    loss, stats = model.total_loss(kind, batch)
                    zero_grads(params)
                    backward(loss)
            except SegmentationOverflowError as e:
                skipped += 1
                if log_f:
                    log_f.write(_dump({"step": step, "kind": kind, "skipped": True,
                                       "reason": str(e)}) + "\n")
                continue
            opt.step()
            model.align.clamp()
            value = loss.item()
            losses.append(value)
            if log_f:
                log_f.write(_dump({
                    "step": step,
                    "kind": kind,
                    "skipped": False,
                    "loss": value,
                    "task_loss": stats["task_loss"],
                    "align_loss": stats["align_loss"],
                    "mi_bound": stats["mi_bound"],
                    "tau": float(np.exp(model.align.log_tau.data)),
                }) + "\n")
    finally:
        if log_f:
            log_f.close()
    return {
        "losses": losses,
        "skipped": skipped,
        "final_step": start_step + steps,
    }


def save_checkpoint(model: CrossModalModel, opt: Adam, rng: Rng, step: int, path: str):
    params = model.named_parameters()
    obj = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "tensors": {
            name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in params.items()
        },
        "opt": dict(opt.state_dict(), global_step=step),
        "rng": rng.state_dict(),
    }
    with open(path, "w") as f:
        f.write(_dump(obj) + "\n")


def load_checkpoint(path: str) -> tuple[CrossModalModel, Adam, Rng, int]:
    with open(path) as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint parse failed at byte {e.pos}: {e.msg}") from None
    version = raw.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version!r} is not supported; this build reads {CHECKPOINT_VERSION}"
        )
    model = CrossModalModel(ModelConfig.from_dict(raw["config"]))
    params = model.named_parameters()
    saved = raw["tensors"]
    if set(saved) != set(params):
        missing = sorted(set(params) - set(saved))
        extra = sorted(set(saved) - set(params))
        raise CheckpointError(f"tensor table mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        entry = saved[name]
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(f"tensor {name} has shape {entry['shape']}, expected {list(p.shape)}")
        arr = np.array(entry["data"], dtype=np.float64)
        if arr.size != p.size:
            raise CheckpointError(f"tensor {name} carries {arr.size} values, expected {p.size}")
        p.data = arr.reshape(p.shape)
    opt_state = dict(raw["opt"])
    step = int(opt_state.pop("global_step"))
    opt = Adam.from_state(params, opt_state)
    rng = Rng.from_state(raw["rng"])
    return model, opt, rng, step
