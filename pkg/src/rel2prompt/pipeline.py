"""One object holding the database, graph, parameters, encoder, decoder and vocab for a run."""
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import diff
from .decoder import Decoder, DecoderConfig
from .diff import ParameterStore
from .encoder import ColumnEncoder, EncoderConfig, RelationalEncoder
from .entity_graph import build_entity_graph
from .metrics import class_alpha, focal_loss_from_log_prob
from .prompt import (TASK_TEMPLATES, PromptConfig, build_graph_prompt, denormalize, render_task_context,
                     serialize_document)
from .relational_store import build_key_index
from .temporal_sampler import SamplerConfig, extend_subgraph, sample_subgraph
from .utils import MISSING, NEG_INF, POS_INF, Utils
from .vocab import Vocab

logger = logging.getLogger('rel2prompt')


def vocab_texts(db, extra_texts=()):
    """Every string the prompts can contain: names, formatted attribute values, templates and extras."""
    texts = ['is , missing example answer : . null', '{ } [ ] " _ - 0 1 2 3 4 5 6 7 8 9']
    for name in db.tables:
        spec = db.spec(name)
        texts.append(name)
        texts.extend(spec.column_names)
        positions = [spec.column_index(c.name) for c in spec.feature_columns]
        for entity in db.entities(name):
            texts.extend(Utils.format_value(entity.attrs[p]) for p in positions if entity.attrs[p] is not MISSING)
    for description, question in TASK_TEMPLATES.values():
        texts.append(description)
        texts.append(question or '')
    texts.extend(extra_texts)
    return texts


def map_ordered(fn, items, threads=1):
    """``fn`` over ``items`` with results in input order, on up to ``threads`` workers."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class PromptModel:
    """
    Sample → encode → project → denormalize → prompt → decode for single examples.

    Column statistics are fitted on rows before ``fit_cutoff`` and the vocab is built from the
    database, unless either is supplied (for example, loaded next to a checkpoint).
    """

    def __init__(self, db, pipeline_config, store=None, vocab=None, fit_cutoff=POS_INF, extra_texts=(), columns=None):
        self.db = db
        self.pipeline_config = pipeline_config
        self.index = build_key_index(db)
        self.graph = build_entity_graph(db, self.index)
        self.sampler_cfg = SamplerConfig.from_pipeline_config(pipeline_config)
        self.encoder_cfg = EncoderConfig.from_pipeline_config(pipeline_config)
        self.prompt_cfg = PromptConfig.from_pipeline_config(pipeline_config)
        self.decoder_cfg = DecoderConfig.from_pipeline_config(pipeline_config)
        self.store = store if store is not None else ParameterStore(pipeline_config['run']['seed'])
        self.columns = columns if columns is not None else ColumnEncoder(self.encoder_cfg.text_buckets).fit(db, fit_cutoff)
        self.vocab = vocab if vocab is not None else Vocab.build(vocab_texts(db, extra_texts))
        self.encoder = RelationalEncoder(db, self.graph, self.store, self.encoder_cfg, self.columns)
        self.decoder = Decoder(self.store, len(self.vocab), self.decoder_cfg)
        self._text_cache = {}

    def latest_time(self):
        times = [int(t.max()) for t in self.graph.times.values() if len(t)]
        return max(times) if times else NEG_INF

    def sample(self, seed, t_star):
        return sample_subgraph(self.graph, seed, t_star, self.sampler_cfg)

    def denormalize(self, seed, t_star):
        return denormalize(self.db, self.graph, self.index, seed, t_star, self.prompt_cfg.n_nest,
                           self.prompt_cfg.zeta, self.sampler_cfg.strict_time)

    def document(self, seed, t_star):
        return serialize_document(self.denormalize(seed, t_star), self.db, self.graph)

    def graph_prompt(self, seed, t_star, plan=None, training=False, rng=None):
        """
        Build the graph prompt for ``seed`` at ``t_star``.

        Denormalized entities not reached by the sampler are added to the subgraph, so every
        tree node has an encoder state. Both respect the same seed-time filter.
        """
        sub = self.sample(seed, t_star)
        tree = self.denormalize(seed, t_star)
        sub = extend_subgraph(self.graph, sub, {n.node: n.depth for n in tree.nodes()})
        h, pooled = self.encoder.encode_graph(sub, plan, training, rng)
        projected_rows = self.encoder.project(h)
        projected = {v: projected_rows[sub.local[v]] for v in tree.node_ids()}
        pooled_projected = self.encoder.project(pooled) if self.prompt_cfg.include_pooled else None
        return build_graph_prompt(tree, projected, pooled_projected, self.prompt_cfg.include_pooled), sub

    # task text
    def task_context(self, task, in_context=()):
        """Task text for ``task``, with each in-context example rendered as its document and answer."""
        context_text = ' '.join(
            f"example : {self.document(e.node, e.time)} answer : {self.label_text(task, e.label)} ."
            for e in in_context)
        return render_task_context(task.template, task.template_params, context_text)

    @staticmethod
    def label_text(task, label):
        if task.task_type == 'classification':
            return 'yes' if label == 1 else 'no'
        return Utils.format_value(float(label))

    def text_embedding(self, ctx):
        ids = tuple(self.vocab.encode(ctx.text))
        if ids in self._text_cache:
            return self._text_cache[ids]
        h_text = self.decoder.embed_text(ids)
        if not h_text.requires_grad:
            self._text_cache[ids] = h_text
        return h_text

    # per-example forward passes
    def answer(self, example, ctx, strategy):
        prompt, _ = self.graph_prompt(example.node, example.time)
        return self.decoder.decode(prompt, self.text_embedding(ctx), strategy, self.vocab)

    def example_loss(self, task, example, ctx, alpha=0.8, gamma=2.0, training=False, rng=None):
        """Focal loss on the YES/NO distribution for classification, |ŷ − y| for regression."""
        prompt, _ = self.graph_prompt(example.node, example.time, training=training, rng=rng)
        h_text = self.text_embedding(ctx)
        if task.task_type == 'classification':
            log_probs = self.decoder.yes_no_log_probs(prompt, h_text)
            log_p = log_probs[0] if example.label == 1 else log_probs[1]
            return focal_loss_from_log_prob(log_p, class_alpha(example.label, alpha), gamma)
        return diff.abs_(self.decoder.regression(prompt, h_text) - float(example.label))

    def batch_loss(self, task, examples, contexts, alpha, gamma, training, rngs, threads=1):
        """Mean example loss; forward passes may run on several threads, the sum is taken in order."""
        losses = map_ordered(
            lambda args: self.example_loss(task, args[0], args[1], alpha, gamma, training, args[2]),
            zip(examples, contexts, rngs), threads)
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        return total / len(losses)

    def predict(self, examples, contexts, strategy, threads=1):
        answers = map_ordered(lambda args: self.answer(args[0], args[1], strategy), zip(examples, contexts), threads)
        return np.array([a.score() for a in answers], dtype=np.float64), answers
