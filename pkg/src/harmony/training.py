"""Two-stage training, the combined text-plus-image objective, checkpoints,
evaluation, and the uni-modal versus joint comparison harness.

Stage 1 (pretrain) adapts the resampler and the diffusion decoder to a
frozen vision encoder and LM. Stage 2 (finetune) additionally trains the
vision encoder, the two output heads, and the adapters while the LM body
stays frozen. Every finetune arm gets the same adapter sites: the routed
arm attaches gated expert groups, all other arms attach the unrouted
single-delta variant, so the comparison isolates routing rather than
adapter capacity. Batches are single-task, drawn 50/50 between modalities
for joint arms, so each batch carries one routing label and the gate's
auxiliary binary cross-entropy is well defined.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import HarmonyModel, InterleavedSequence
from .config import derive_seed, rng_for
from .errors import (CheckpointError, ConfigError, ContractError,
                     TrainingDiverged)
from .experts import attach, attach_dense
from .metrics import (acc_at_05, exact_accuracy, ned, pixel_mse, report_table,
                      toy_fid)
from .synthworld import (default_vocabulary, format_sequence, make_dataset)

ARMS = ("text_only", "image_only", "joint_dense", "joint_slide_lora")
STAGES = ("pretrain", "finetune")

_PRETRAIN_PREFIXES = ("resampler.", "diffusion.")
_FINETUNE_PREFIXES = ("vision.", "resampler.", "diffusion.",
                      "lm.text_head.", "lm.cond_head.")


@dataclass
class TrainConfig:
    stage: str
    lr: float
    batch: int
    steps: int
    arm: str = "joint_dense"
    lambda_gate: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    log_every: int = 10
    freeze_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


class Adam:
    def __init__(self, named_params, lr, beta1=0.9, beta2=0.99, eps=1e-8):
        self.named = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named.items()}

    def zero_grad(self):
        for p in self.named.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    def __init__(self, named_params, lr, momentum=0.9):
        self.named = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.t = 0
        self.vel = {name: np.zeros_like(p.data) for name, p in self.named.items()}

    def zero_grad(self):
        for p in self.named.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        for name, p in self.named.items():
            vel = self.vel[name]
            vel *= self.momentum
            vel += p.grad
            p.data -= self.lr * vel


def make_optimizer(kind, named_params, lr):
    if kind == "adam":
        return Adam(named_params, lr)
    return Sgd(named_params, lr)


def stage_trainable(model: HarmonyModel, stage: str, overrides=None) -> dict:
    """Apply the freezing policy in place; return the trainable set by name.

    Adapter parameters (experts and gates) train during finetune wherever
    they sit; the linear maps they wrap never train. The LM body is frozen
    in both stages, its two output heads only during finetune.
    """
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}, got {stage!r}")
    registries = [r for r in (getattr(model, "slide_registry", None),
                              getattr(model, "dense_registry", None))
                  if r is not None]
    wrapped_ids = {pid for r in registries for pid in r.base_param_ids()}
    adapter_ids = {id(p) for r in registries for _, p in r.named_params()}
    prefixes = _PRETRAIN_PREFIXES if stage == "pretrain" else _FINETUNE_PREFIXES

    trainable = {}
    for name, p in model.named_params():
        on = name.startswith(prefixes)
        if stage == "finetune" and id(p) in adapter_ids:
            on = True
        if id(p) in wrapped_ids:
            on = False
        for prefix, flag in (overrides or {}).items():
            if name.startswith(prefix):
                on = bool(flag)
        if on and id(p) in wrapped_ids:
            on = False
        if on:
            p.requires_grad = True
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            trainable[name] = p
        else:
            p.requires_grad = False
            p.grad = None
    return trainable


def combined_loss(model: HarmonyModel, batch, rng: np.random.Generator):
    """Position-weighted text cross-entropy plus per-span diffusion loss.

    Also collects each routed layer's gate logit for every sample (the gate
    fires inside the forward pass, so this is the only place to catch them)
    and the running mean of gamma for diagnostics.
    """
    if not batch:
        raise ContractError("empty batch")
    registry = getattr(model, "slide_registry", None)
    text_sum = None
    image_sum = None
    text_positions = 0
    image_spans = 0
    gate_logits = []
    gammas = []
    for seq in batch:
        out = model.forward_sequence(seq)
        if registry is not None:
            gate_logits.append([layer.last_logit for layer in registry])
            gammas.extend(layer.last_gamma for layer in registry)
        if seq.n_t:
            ce = T.softmax_cross_entropy(out["text_logits"], seq.text_targets)
            weighted = T.scale(ce, float(len(seq.n_t)))
            text_sum = weighted if text_sum is None else T.add(text_sum, weighted)
            text_positions += len(seq.n_t)
        if seq.n_i:
            dl = model.diffusion.denoise_loss(seq.target_image,
                                              out["image_conditions"], rng)
            image_sum = dl if image_sum is None else T.add(image_sum, dl)
            image_spans += 1
    if text_positions == 0 and image_spans == 0:
        raise ContractError("batch carries no supervised positions")
    text_ce = T.scale(text_sum, 1.0 / text_positions) if text_sum is not None \
        else T.Tensor(0.0)
    image_mse = T.scale(image_sum, 1.0 / image_spans) if image_sum is not None \
        else T.Tensor(0.0)
    total = T.add(text_ce, image_mse)
    parts = {
        "text_ce": float(text_ce.item()),
        "image_mse": float(image_mse.item()),
        "gate_logits": gate_logits,
        "gamma_mean": float(np.mean(gammas)) if gammas else None,
    }
    return total, parts


def gate_aux_loss(gate_logits, labels) -> T.Tensor:
    """Binary cross-entropy of every layer's route logit against the task label.

    gate_logits is one list of per-layer logits per sample, as collected by
    combined_loss; labels align with samples.
    """
    if len(gate_logits) != len(labels):
        raise ContractError(f"{len(gate_logits)} logit sets for {len(labels)} labels")
    stacked = []
    targets = []
    for per_sample, label in zip(gate_logits, labels):
        if label is None:
            raise ContractError("sample lacks a task label for gate supervision")
        for logit in per_sample:
            stacked.append(logit)
            targets.append([float(label)])
    if not stacked:
        raise ContractError("no gate logits collected; model is not instrumented")
    return T.bce_with_logits(T.concat_rows(stacked), np.asarray(targets))


def train_step(model: HarmonyModel, optimizer, batch, rng: np.random.Generator,
               lambda_gate: float = 0.1) -> dict:
    T.reset_graph()
    optimizer.zero_grad()
    total, parts = combined_loss(model, batch, rng)
    if parts["gate_logits"]:
        aux = gate_aux_loss(parts["gate_logits"], [s.task_label for s in batch])
        full = T.add(total, T.scale(aux, lambda_gate))
        gate_val = float(aux.item())
    else:
        full = total
        gate_val = 0.0
    record = {
        "total": float(full.item()),
        "text_ce": parts["text_ce"],
        "image_mse": parts["image_mse"],
        "gate_aux": gate_val,
        "gamma_mean": parts["gamma_mean"],
    }
    if not np.isfinite(record["total"]):
        raise TrainingDiverged(f"non-finite loss {record['total']}", components=record)
    T.backward(full)
    optimizer.step()
    return record


class BatchSampler:
    """Single-task batches; joint arms flip a fair coin per step."""

    def __init__(self, sequences, arm: str, batch: int, rng: np.random.Generator):
        self.rng = rng
        self.batch = batch
        self.text = [s for s in sequences if s.task_label == 1]
        self.image = [s for s in sequences if s.task_label == 0]
        self.arm = arm
        if arm == "text_only" and not self.text:
            raise ContractError("text_only arm needs text-task sequences")
        if arm == "image_only" and not self.image:
            raise ContractError("image_only arm needs image-task sequences")
        if arm in ("joint_dense", "joint_slide_lora") and (not self.text or not self.image):
            raise ContractError("joint arms need both modalities in the dataset")

    def next(self):
        if self.arm == "text_only":
            pool = self.text
        elif self.arm == "image_only":
            pool = self.image
        else:
            pool = self.text if self.rng.random() < 0.5 else self.image
        idx = self.rng.choice(len(pool), size=self.batch,
                              replace=len(pool) < self.batch)
        return [pool[int(i)] for i in idx]


def train(model: HarmonyModel, sequences, cfg: TrainConfig,
          metrics_path=None) -> list[dict]:
    """Run one stage; returns the per-logged-step records.

    Frozen parameters are snapshotted up front and bit-compared at the end;
    a mismatch means the freezing policy leaked and is raised loudly.
    """
    rng = rng_for(cfg.seed, f"train/{cfg.stage}/{cfg.arm}")
    trainable = stage_trainable(model, cfg.stage, cfg.freeze_overrides)
    optimizer = make_optimizer(cfg.optimizer, trainable, cfg.lr)
    sampler = BatchSampler(sequences, cfg.arm, cfg.batch, rng)
    trainable_ids = {id(p) for p in trainable.values()}
    frozen = [(name, p, p.data.copy()) for name, p in model.named_params()
              if id(p) not in trainable_ids]

    records = []
    for step in range(1, cfg.steps + 1):
        record = train_step(model, optimizer, sampler.next(), rng,
                            lambda_gate=cfg.lambda_gate)
        record["step"] = step
        if step % cfg.log_every == 0 or step == cfg.steps:
            records.append(record)

    for name, p, before in frozen:
        if not np.array_equal(p.data, before):
            raise ContractError(f"frozen parameter {name} changed during {cfg.stage}")
    if metrics_path is not None:
        lines = [json.dumps(r, sort_keys=True) for r in records]
        Path(metrics_path).write_text("\n".join(lines) + "\n")
    return records


FORMAT_VERSION = 1


def _entry_list(model, optimizer=None):
    entries = []
    seen = set()
    for name, p in model.named_params():
        if name in seen:
            raise CheckpointError(f"duplicate parameter name {name}")
        seen.add(name)
        entries.append((name, p.data))
    if optimizer is not None:
        for name in optimizer.named:
            slots = (("m", optimizer.m), ("v", optimizer.v)) if isinstance(optimizer, Adam) \
                else (("vel", optimizer.vel),)
            for label, table in slots:
                entries.append((f"opt.{label}.{name}", table[name]))
    return entries


def _snap_f32(arr: np.ndarray) -> None:
    arr[...] = arr.astype("<f4").astype(np.float64)


def save_checkpoint(dirpath, model, optimizer=None, rng=None, step=0,
                    config=None) -> None:
    """Write manifest.json + params.bin.

    The live arrays are rounded to their stored 32-bit values in place, so
    continuing in this process is bit-identical to loading the checkpoint
    elsewhere and continuing there.
    """
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    entries = _entry_list(model, optimizer)
    for _, arr in entries:
        _snap_f32(arr)
    manifest = {
        "format": FORMAT_VERSION,
        "step": int(step),
        "config": config,
        "rng_state": _rng_state_to_json(rng),
        "optimizer": None,
        "entries": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
    }
    if optimizer is not None:
        manifest["optimizer"] = {
            "type": "adam" if isinstance(optimizer, Adam) else "sgd",
            "t": optimizer.t,
            "lr": optimizer.lr,
        }
    (dirpath / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    payload = b"".join(arr.astype("<f4").tobytes() for _, arr in entries)
    (dirpath / "params.bin").write_bytes(payload)


def _rng_state_to_json(rng):
    if rng is None:
        return None
    state = rng.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": {k: int(v) for k, v in state["state"].items()},
            "has_uint32": int(state.get("has_uint32", 0)),
            "uinteger": int(state.get("uinteger", 0))}


def rng_from_state(payload) -> np.random.Generator | None:
    if payload is None:
        return None
    bitgen = np.random.PCG64()
    bitgen.state = {"bit_generator": payload["bit_generator"],
                    "state": {k: int(v) for k, v in payload["state"].items()},
                    "has_uint32": payload["has_uint32"],
                    "uinteger": payload["uinteger"]}
    return np.random.Generator(bitgen)


def load_checkpoint(dirpath, model, optimizer=None) -> dict:
    """Restore parameters (and optimizer slots) in place; returns metadata.

    Any mismatch between the stored names/shapes and the live model is
    reported as a named diff rather than a partial load.
    """
    dirpath = Path(dirpath)
    manifest = json.loads((dirpath / "manifest.json").read_text())
    if manifest["format"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest['format']}")
    entries = _entry_list(model, optimizer)
    stored = [(e["name"], tuple(e["shape"])) for e in manifest["entries"]]
    live = [(name, arr.shape) for name, arr in entries]
    if stored != live:
        stored_names = {n for n, _ in stored}
        live_names = {n for n, _ in live}
        missing = sorted(live_names - stored_names)
        extra = sorted(stored_names - live_names)
        shape_diffs = sorted(n for (n, s) in stored if (n, s) not in set(live)
                             and n in live_names)
        raise CheckpointError(
            "checkpoint does not match the model: "
            f"missing={missing[:8]} extra={extra[:8]} shape_changed={shape_diffs[:8]}")
    payload = (dirpath / "params.bin").read_bytes()
    expected = sum(int(np.prod(s)) if s else 1 for _, s in stored) * 4
    if len(payload) != expected:
        raise CheckpointError(
            f"params.bin holds {len(payload)} bytes, manifest implies {expected}")
    offset = 0
    for name, arr in entries:
        count = arr.size
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arr[...] = flat.astype(np.float64).reshape(arr.shape)
        offset += count * 4
    if optimizer is not None and manifest["optimizer"] is not None:
        optimizer.t = int(manifest["optimizer"]["t"])
    return {"step": manifest["step"], "config": manifest["config"],
            "rng": rng_from_state(manifest["rng_state"])}


_BOX_CHARS = set("0123456789,<>")


def _parse_box(text: str):
    text = text.strip()
    if not (text.startswith("<") and text.endswith(">")):
        return None
    inner = text[1:-1]
    parts = inner.split(",")
    if len(parts) != 4:
        return None
    try:
        box = tuple(int(p) for p in parts)
    except ValueError:
        return None
    x0, y0, x1, y1 = box
    if x0 >= x1 or y0 >= y1:
        return None
    return box


def evaluate(model: HarmonyModel, samples, vocab, seed: int) -> dict:
    """Greedy text answers and sampled images against the reference set."""
    queries = model.cfg["model"]["queries"]
    image_slots = model.cfg["model"]["image_slots"]
    preds, golds, neds = [], [], []
    box_hits = box_total = 0
    mses = []
    generated, targets = [], []
    for i, sample in enumerate(samples):
        seq = format_sequence(sample, vocab, queries, image_slots)
        rng = rng_for(seed, f"eval/{i}")
        if sample.task_label == 1:
            prompt = InterleavedSequence(
                tokens=seq.tokens[:seq.n_t[0]], input_image=seq.input_image,
                input_span=seq.input_span, task_label=1)
            budget = model.lm.max_len - len(prompt.tokens)
            out = model.generate(prompt, "text", budget, rng)
            pred = vocab.decode(out.tokens[len(prompt.tokens):])
            preds.append(pred)
            golds.append(sample.answer)
            neds.append(ned(pred, sample.answer))
            if sample.answer.startswith("<") and sample.boxes and len(sample.boxes) == 1:
                box_total += 1
                parsed = _parse_box(pred)
                if parsed is not None and acc_at_05(parsed, sample.boxes[0])[0]:
                    box_hits += 1
        else:
            prompt = InterleavedSequence(
                tokens=seq.tokens[:seq.n_i[0] - 1], input_image=seq.input_image,
                input_span=seq.input_span, task_label=0)
            out = model.generate(prompt, "image", 0, rng)
            mses.append(pixel_mse(out.generated_image, sample.target_image))
            generated.append(out.generated_image)
            targets.append(sample.target_image)
    result = {
        "n_text": len(preds),
        "n_image": len(mses),
        "accuracy": exact_accuracy(preds, golds) if preds else None,
        "ned": float(np.mean(neds)) if neds else None,
        "acc_at_05": box_hits / box_total if box_total else None,
        "pixel_mse": float(np.mean(mses)) if mses else None,
        "toy_fid": toy_fid(generated, targets) if len(generated) >= 2 else None,
    }
    registry = getattr(model, "slide_registry", None)
    if registry is not None:
        result["routing_accuracy"] = _routing_accuracy(model, samples, vocab, seed)
    return result


def _routing_accuracy(model, samples, vocab, seed) -> float:
    """Majority vote of the layer gates against each sample's task label."""
    registry = model.slide_registry
    queries = model.cfg["model"]["queries"]
    image_slots = model.cfg["model"]["image_slots"]
    ok = 0
    with T.no_grad():
        for sample in samples:
            seq = format_sequence(sample, vocab, queries, image_slots)
            model.forward_sequence(seq)
            votes = [1 if layer.last_gamma >= 0.5 else 0 for layer in registry]
            predicted = 1 if np.mean(votes) >= 0.5 else 0
            ok += predicted == sample.task_label
    return ok / len(samples)


def build_model(cfg: dict, vocab_size: int, seed: int) -> HarmonyModel:
    return HarmonyModel(cfg, vocab_size, rng_for(seed, "model/init"))


def prepare_datasets(cfg: dict, seed: int, vocab):
    """Disjoint train/eval sample streams derived from one master seed."""
    m = cfg["model"]
    train_samples = make_dataset(derive_seed(seed, "data/train"),
                                 cfg["data"]["train_size"])
    eval_samples = make_dataset(derive_seed(seed, "data/eval"),
                                cfg["data"]["eval_size"])
    train_seqs = [format_sequence(s, vocab, m["queries"], m["image_slots"])
                  for s in train_samples]
    return train_seqs, eval_samples


def snapshot_params(model) -> dict:
    return {name: p.data.copy() for name, p in model.named_params()}


def restore_params(model, snapshot) -> None:
    for name, p in model.named_params():
        p.data[...] = snapshot[name]


def pretrain(model, train_seqs, cfg: dict, seed: int, metrics_path=None):
    tcfg = TrainConfig(stage="pretrain", arm="joint_dense",
                       lr=cfg["train"]["lr_pretrain"], batch=cfg["train"]["batch"],
                       steps=cfg["train"]["pretrain_steps"],
                       lambda_gate=cfg["train"]["lambda_gate"], seed=seed,
                       log_every=cfg["train"]["log_every"])
    return train(model, train_seqs, tcfg, metrics_path=metrics_path)


def finetune_arm(cfg: dict, vocab, seed: int, snapshot, train_seqs, eval_samples,
                 arm: str, placement: str | None = None, metrics_path=None) -> dict:
    """One finetuning run from the shared pretrained snapshot, then eval.

    Every arm under a given seed starts from identical weights, gets adapters
    on the same sites (routed for joint_slide_lora, unrouted otherwise), and
    is scored with identical evaluation noise, so metric differences come
    from the training recipe alone.
    """
    model = build_model(cfg, len(vocab), seed)
    restore_params(model, snapshot)
    used_placement = None
    if arm == "joint_slide_lora":
        used_placement = placement or cfg["slide_lora"]["placement"]
        attach(model, used_placement, cfg["slide_lora"],
               rng_for(seed, f"lora/{used_placement}"))
    else:
        attach_dense(model, cfg["slide_lora"]["placement"], cfg["slide_lora"],
                     rng_for(seed, "lora/dense"))
    tcfg = TrainConfig(stage="finetune", arm=arm, lr=cfg["train"]["lr_finetune"],
                       batch=cfg["train"]["batch"],
                       steps=cfg["train"]["finetune_steps"],
                       lambda_gate=cfg["train"]["lambda_gate"], seed=seed,
                       log_every=cfg["train"]["log_every"])
    records = train(model, train_seqs, tcfg, metrics_path=metrics_path)
    scores = evaluate(model, eval_samples, vocab, derive_seed(seed, "eval-run"))
    row = {"seed": seed, "arm": arm, "placement": used_placement,
           "final_loss": records[-1]["total"], **scores}
    return row


_ABLATION_PLACEMENTS = ("vision_encoder", "llm")


def run_experiment(cfg: dict, out_dir=None, seeds=None, max_workers=None) -> dict:
    """The full comparison: four arms plus adapter-placement rows, per seed."""
    vocab = default_vocabulary()
    seeds = list(seeds if seeds is not None else cfg["experiment"]["seeds"])
    rows = []
    for seed in seeds:
        train_seqs, eval_samples = prepare_datasets(cfg, seed, vocab)
        base = build_model(cfg, len(vocab), seed)
        pretrain(base, train_seqs, cfg, seed)
        snapshot = snapshot_params(base)

        jobs = [("text_only", None), ("image_only", None), ("joint_dense", None),
                ("joint_slide_lora", cfg["slide_lora"]["placement"])]
        jobs += [("joint_slide_lora", p) for p in _ABLATION_PLACEMENTS
                 if p != cfg["slide_lora"]["placement"]]

        def run_job(job, _seed=seed, _snap=snapshot, _train=train_seqs,
                    _eval=eval_samples):
            arm, placement = job
            return finetune_arm(cfg, vocab, _seed, _snap, _train, _eval,
                                arm, placement)

        if max_workers and max_workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                rows.extend(pool.map(run_job, jobs))
        else:
            rows.extend(run_job(job) for job in jobs)

    summary = interference_summary(rows)
    columns = ["seed", "arm", "placement", "accuracy", "ned", "acc_at_05",
               "pixel_mse", "toy_fid", "routing_accuracy"]
    table = report_table(rows, columns)
    report = {"rows": rows, "summary": summary, "table": table}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {"rows": rows, "summary": summary}
        (out_dir / "report.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (out_dir / "table.txt").write_text(table + "\n")
    return report


def interference_summary(rows) -> dict:
    """Per-seed interference and recovery bookkeeping for the arm rows."""
    index = {}
    for r in rows:
        index[(r["seed"], r["arm"], r["placement"])] = r
    seeds = sorted({r["seed"] for r in rows})
    per_seed = []
    for s in seeds:
        text_only = index.get((s, "text_only", None))
        image_only = index.get((s, "image_only", None))
        joint = index.get((s, "joint_dense", None))
        slide = index.get((s, "joint_slide_lora", "both"))
        entry = {"seed": s}
        if not (text_only and image_only and joint):
            per_seed.append(entry)
            continue
        acc_t, acc_j = text_only["accuracy"], joint["accuracy"]
        mse_i, mse_j = image_only["pixel_mse"], joint["pixel_mse"]
        entry.update(text_only_acc=acc_t, joint_acc=acc_j,
                     image_only_mse=mse_i, joint_mse=mse_j,
                     text_interference=acc_j < acc_t,
                     image_interference=mse_j > mse_i)
        entry["interference"] = entry["text_interference"] and entry["image_interference"]
        if slide:
            acc_s, mse_s = slide["accuracy"], slide["pixel_mse"]
            text_gap = acc_t - acc_j
            image_gap = mse_j - mse_i
            entry.update(slide_acc=acc_s, slide_mse=mse_s)
            entry["text_recovery"] = (acc_s - acc_j) / text_gap if text_gap > 0 else None
            entry["image_recovery"] = (mse_j - mse_s) / image_gap if image_gap > 0 else None
            # a seed with no gap has nothing to recover and counts as recovered
            text_ok = text_gap <= 0 or (acc_s - acc_j) >= 0.5 * text_gap
            image_ok = image_gap <= 0 or (mse_j - mse_s) >= 0.5 * image_gap
            entry["recovered"] = text_ok and image_ok
        llm_row = index.get((s, "joint_slide_lora", "llm"))
        vis_row = index.get((s, "joint_slide_lora", "vision_encoder"))
        both_row = slide
        if llm_row and vis_row and both_row:
            entry["ablation_ordering"] = (
                llm_row["accuracy"] > vis_row["accuracy"]
                and both_row["accuracy"] > vis_row["accuracy"])
        per_seed.append(entry)
    n = len(seeds)
    return {
        "per_seed": per_seed,
        "n_seeds": n,
        "interference_seeds": sum(1 for e in per_seed if e.get("interference")),
        "recovery_seeds": sum(1 for e in per_seed if e.get("recovered")),
        "ablation_seeds": sum(1 for e in per_seed if e.get("ablation_ordering")),
    }
