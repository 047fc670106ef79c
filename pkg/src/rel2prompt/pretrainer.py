"""Masked attribute pretraining: corrupt a sampled subgraph, then reconstruct the masked entities' columns."""
import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from . import diff
from .errors import ConfigError, EmptyMaskSet
from .optim import build_optimizer
from .prompt import DenormTree, TreeNode, build_graph_prompt
from .utils import Utils
from .vocab import EOS

logger = logging.getLogger('rel2prompt')

MASK_MODES = ('entity', 'cell')
MASK_TOKEN = '[MASK]'


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    p_mask: float = 0.5
    mode: str = 'entity'
    permute: bool = True
    lr: float = 1e-3
    batch_size: int = 8
    seeds_per_epoch: int = 64

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError(f"p_mask must be in [0, 1], got {self.p_mask}")
        if self.mode not in MASK_MODES:
            raise ConfigError(f"Masking mode must be one of {MASK_MODES}, got {self.mode}")
        if self.epochs < 0 or self.batch_size < 1 or self.seeds_per_epoch < 1:
            raise ConfigError(f"Invalid pretraining schedule: {self}")

    @classmethod
    def from_pipeline_config(cls, pipeline_config):
        section = pipeline_config['pretrain']
        return cls(int(section['epochs']), float(section['p_mask']), section['mode'], bool(section['permute']),
                   float(section['lr']), int(section['batch_size']), int(section['seeds_per_epoch']))


@dataclass(frozen=True)
class MaskTargets:
    columns: tuple
    x_text: str
    y_text: str


@dataclass
class MaskPlan:
    masked: frozenset
    mode: str = 'entity'
    cells: dict = field(default_factory=dict)
    permutations: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    p_mask: float = 0.0

    def __len__(self):
        return len(self.masked)


def build_mask_targets(entity, spec, pi, hidden=None):
    """
    "k is v" clauses over the feature columns in the order ``pi``.

    ``hidden`` names the columns shown as ``[MASK]`` in X; by default every column is hidden.
    Missing values render as ``missing``.
    """
    columns = [c.name for c in spec.feature_columns]
    if not columns:
        raise ValueError(f"Table {spec.name} has no attribute columns to reconstruct")
    if sorted(pi) != list(range(len(columns))):
        raise ValueError(f"{pi} is not a permutation of {len(columns)} columns")
    ordered = tuple(columns[i] for i in pi)
    hidden = set(ordered) if hidden is None else set(hidden)
    values = {name: Utils.format_value(entity.attr(spec, name)) for name in ordered}
    y_text = ', '.join(f'{name} is {values[name]}' for name in ordered)
    x_text = ', '.join(f'{name} is {MASK_TOKEN if name in hidden else values[name]}' for name in ordered)
    return MaskTargets(ordered, x_text, y_text)


def mask_subgraph(db, g, sub, p_mask, mode, rng, permute=True):
    """
    Mask round(p_mask * subgraph size) nodes and record per-node permutations and targets.

    The subgraph itself is not copied: the plan is applied at the column-encoder output, where
    a masked node (entity mode) or masked cell (cell mode) is replaced by the lifted mask vector.
    Targets are captured here, from the attribute values at masking time.
    """
    if not 0.0 <= p_mask <= 1.0:
        raise ConfigError(f"p_mask must be in [0, 1], got {p_mask}")
    if mode not in MASK_MODES:
        raise ConfigError(f"Masking mode must be one of {MASK_MODES}, got {mode}")
    nodes = sub.node_ids
    count = int(round(p_mask * len(nodes)))
    picked = sorted(rng.choice(len(nodes), size=count, replace=False).tolist()) if count else []
    masked = frozenset(nodes[i] for i in picked)

    cells, permutations, targets = {}, {}, {}
    for v in sorted(masked):
        table = g.table_of(v)
        spec = db.spec(table)
        width = len(spec.feature_columns)
        if width == 0:
            continue
        pi = tuple(rng.permutation(width).tolist()) if permute else tuple(range(width))
        permutations[v] = pi
        hidden = None
        if mode == 'cell':
            chosen = rng.random(width) < max(p_mask, 1.0 / width)
            if not chosen.any():
                chosen[int(rng.integers(width))] = True
            hidden = frozenset(spec.feature_columns[i].name for i in range(width) if chosen[i])
            cells[v] = hidden
        targets[v] = build_mask_targets(db.entities(table)[g.row_of(v)], spec, pi, hidden)
    return sub, MaskPlan(masked, mode, cells, permutations, targets, p_mask)


def _single_node_tree(g, v):
    return DenormTree(TreeNode(v, g.table_of(v), 0), [g.table_of(v)])


def masked_node_terms(model, sub, plan, training=False, rng=None):
    """Per masked node: (prompt, h_text, target ids) for teacher forcing."""
    if not plan.targets:
        raise EmptyMaskSet("No masked node with attribute columns in this subgraph")
    h, pooled = model.encoder.encode_graph(sub, plan, training, rng)
    projected = model.encoder.project(h)
    pooled_projected = model.encoder.project(pooled)
    terms = []
    for v in sorted(plan.targets):
        targets = plan.targets[v]
        tree = _single_node_tree(model.graph, v)
        prompt = build_graph_prompt(tree, {v: projected[sub.local[v]]}, pooled_projected, model.prompt_cfg.include_pooled)
        h_text = model.decoder.embed_text(model.vocab.encode(targets.x_text))
        target = model.vocab.encode(targets.y_text) + [EOS]
        terms.append((prompt, h_text, target))
    return terms


def pretrain_loss(model, batch, training=False, rng=None):
    """
    Mean over all masked nodes in the batch of each node's mean token NLL of the full attribute text given the node prompt and the masked text.

    :param batch: (subgraph, MaskPlan) pairs.
    :raises EmptyMaskSet: If no pair masks a node with attributes.
    """
    losses = []
    for sub, plan in batch:
        if not plan.targets:
            continue
        for prompt, h_text, target in masked_node_terms(model, sub, plan, training, rng):
            losses.append(model.decoder.teacher_forced_loss(prompt, h_text, target))
    if not losses:
        raise EmptyMaskSet("The batch masks no node with attribute columns")
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total / len(losses)


def reconstruction_accuracy(model, batch):
    """Fraction of target tokens whose teacher-forced argmax equals the target."""
    correct, total = 0, 0
    for sub, plan in batch:
        if not plan.targets:
            continue
        for prompt, h_text, target in masked_node_terms(model, sub, plan):
            extra = model.decoder.embed_ids(target[:-1], h_text.shape[0]) if len(target) > 1 else None
            logits = model.decoder.logits(prompt, h_text, extra).data[-len(target):]
            correct += int((np.argmax(logits, axis=1) == np.array(target)).sum())
            total += len(target)
    return correct / total if total else 0.0


def build_batch(model, seeds, t_star, cfg, rng):
    batch = []
    for seed in seeds:
        sub = model.sample(seed, t_star)
        batch.append(mask_subgraph(model.db, model.graph, sub, cfg.p_mask, cfg.mode, rng, cfg.permute))
    return batch


def pretrain(model, cfg, metrics_log, run_seed=0, t_star=None, seed_tables=None, eval_seeds=16):
    """
    Pretrain the encoder, projection and mask vector (and the decoder when trainable) on masked attribute prediction.

    Seeds are drawn from every node of ``seed_tables`` (default: all tables with attribute
    columns); all subgraphs are sampled at ``t_star`` (default: the latest timestamp). After each
    epoch a fixed evaluation batch is scored and one row goes to ``metrics_log``.
    """
    t_star = model.latest_time() if t_star is None else t_star
    tables = seed_tables or [t for t in model.graph.table_names if model.db.spec(t).feature_columns]
    pool = [v for t in tables for v in model.graph.nodes(t)]
    if not pool:
        raise EmptyMaskSet("No table has attribute columns to pretrain on")
    optimizer = build_optimizer(model.store, cfg.lr)

    eval_rng = Utils.derive_rng(run_seed, 7, 0)
    eval_seeds = [pool[i] for i in sorted(eval_rng.choice(len(pool), size=min(eval_seeds, len(pool)), replace=False).tolist())]
    eval_batch = build_batch(model, eval_seeds, t_star, cfg, eval_rng)

    step = 0
    for epoch in range(cfg.epochs):
        epoch_rng = Utils.derive_rng(run_seed, 7, epoch + 1)
        seeds = [pool[i] for i in epoch_rng.choice(len(pool), size=cfg.seeds_per_epoch, replace=len(pool) < cfg.seeds_per_epoch)]
        for start in tqdm(range(0, len(seeds), cfg.batch_size), desc=f'pretrain epoch {epoch}', leave=False, disable=None):
            batch = build_batch(model, seeds[start:start + cfg.batch_size], t_star, cfg, epoch_rng)
            if not any(plan.targets for _, plan in batch):
                continue
            loss = pretrain_loss(model, batch, training=True, rng=Utils.derive_rng(run_seed, 8, step))
            diff.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            step += 1
        eval_loss = pretrain_loss(model, eval_batch).item()
        accuracy = reconstruction_accuracy(model, eval_batch)
        metrics_log.append(step, 'pretrain', 'masked_token_accuracy', accuracy, eval_loss, optimizer.lr)
    return metrics_log
