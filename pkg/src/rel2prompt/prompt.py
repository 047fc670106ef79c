"""Denormalization trees, nested graph prompts, task templates, JSON documents and in-context examples."""
import json
import logging
import string
from dataclasses import dataclass, field

from .errors import ConfigError, InsufficientExamples, MissingEmbedding, UnknownTask
from .utils import NEG_INF, Utils
from .vocab import tokenize

logger = logging.getLogger('rel2prompt')

YES_NO = 'Give Yes or No as an answer.'
FLOAT_ANSWER = 'Provide a float numerical answer.'
INTEGER_ANSWER = 'Give an integer as an answer.'

# (description prompt, question prompt); a question of None is derived from the description
TASK_TEMPLATES = {
    'rel-event/user-attendance': (
        'This task is to predict how many events each user will respond yes or maybe in the next seven days.',
        f'What is the attendance of user? {INTEGER_ANSWER}'),
    'rel-event/user-ignore': (
        'This task is to predict whether a user will ignore more than 2 event invitations in the next 7 days.',
        f'Given recent activity and event history, will this user ignore more than 2 event invitations in the next 7 days? {YES_NO}'),
    'rel-event/user-repeat': (
        'This task is to predict whether a user will attend an event (by responding yes or maybe) in the next 7 days '
        'if they have already attended an event in the last 14 days.',
        f'Given recent activity and event history, will this user attend an event in the next 7 days? {YES_NO}'),
    'rel-amazon/user-churn': (
        'This task is to predict if the customer will review any product in the next 3 months or not.',
        f'Based on the customer data provided, will this customer review any product in the next 3 months? {YES_NO}'),
    'rel-amazon/item-churn': (
        'This task is to predict if the product will receive any reviews in the next 3 months or not.',
        f'Based on the product data provided, will the product receive any reviews in the next 3 months? {YES_NO}'),
    'rel-amazon/user-ltv': (
        'This task is to predict the $ value of the total number of products each user will buy and review in the next 3 months.',
        f'What is the total dollar value of products this user will buy and review in the next 3 months? {FLOAT_ANSWER}'),
    'rel-amazon/item-ltv': (
        'This task is to predict the $ value of the total number of purchases and reviews each product will receive in the next 3 months.',
        f'What is the total dollar value of purchases this product will receive in the next 3 months? {FLOAT_ANSWER}'),
    'rel-stack/post-votes': (
        "This task is to predict how many votes this user's post will receive in the next 3 months.",
        f"Based on records of activity, how many votes will this user's post receive in the next 3 months? {INTEGER_ANSWER}"),
    'rel-stack/user-engagement': (
        'This task is to predict if a user will make any votes, posts, or comments in the next 3 months or not.',
        f'Based on records of activity, will this user make any votes, posts, or comments in the next 3 months? {YES_NO}'),
    'rel-stack/user-badge': (
        'This task is to predict if a user will receive a new badge in the next 3 months or not.',
        f'Based on records of activity, will this user receive a new badge in the next 3 months? {YES_NO}'),
    'rel-avito/user-visits': (
        'This task is to predict whether this customer will visit more than one Ad in the next 4 days or not.',
        f'Will this customer visit more than one Ad in the next 4 days? {YES_NO}'),
    'rel-avito/user-clicks': (
        'This task is to predict whether this customer will click on more than one Ads in the next 4 days or not.',
        f'Will this customer click on more than one Ads in the next 4 days? {YES_NO}'),
    'rel-avito/ad-ctr': (
        'Assuming the Ad will be clicked in the next 4 days, this task is to predict the Click-Through-Rate (CTR) for each Ad.',
        'What is the Click-Through-Rate (CTR) for this Ad?'),
    'rel-f1/driver-position': (
        'This task is to predict the average finishing position of each driver across all races in the next 2 months.',
        f'What is the average finishing position of this driver across all races in the next 2 months? {FLOAT_ANSWER}'),
    'rel-f1/driver-dnf': (
        'This task is to predict if this driver will finish a race in the next 1 month or not.',
        f'Will this driver finish a race in the next 1 month? {YES_NO}'),
    'rel-f1/driver-top3': (
        'This task is to predict if this driver will qualify in the top-3 for a race in the next 1 month or not.',
        f'Will this driver qualify in the top-3 for a race in the next 1 month? {YES_NO}'),
    'rel-trial/study-outcome': (
        'This task is to predict if the trial in the next 1 year will achieve its primary outcome or not.', None),
    'rel-trial/study-adverse': (
        'This task is to predict the number of affected patients with severe adverse events/deaths for the trial in the next 1 year.', None),
    'rel-trial/site-success': (
        'This task is to predict the success rate of a trial site in the next 1 year.', None),
    'rel-hm/item-sales': (
        'This task is to predict the total sales for an article in the next week.', None),
    'rel-hm/user-churn': (
        'This task is to predict the churn for a customer (no transactions) in the next week.', None),
    'synth/churn': (
        'This task is to predict if the user made no {event_kind} events in the last {window_days} days before the seed time or not.',
        'Based on the activity history provided, did this user make no {event_kind} events in the last {window_days} days? ' + YES_NO),
    'synth/activity-count': (
        'This task is to predict how many events the user made in the last {window_days} days before the seed time.',
        'Based on the activity history provided, how many events did this user make in the last {window_days} days? ' + INTEGER_ANSWER),
}

REGRESSION_TEMPLATES = {
    'rel-event/user-attendance', 'rel-amazon/user-ltv', 'rel-amazon/item-ltv', 'rel-stack/post-votes',
    'rel-avito/ad-ctr', 'rel-f1/driver-position', 'rel-trial/study-adverse', 'rel-trial/site-success',
    'rel-hm/item-sales', 'synth/activity-count',
}


@dataclass(frozen=True)
class PromptConfig:
    n_nest: int = 8
    zeta: int = 1
    include_pooled: bool = True
    n_inc: int = 0

    def __post_init__(self):
        if self.n_nest < 0 or self.zeta < 0 or self.n_inc < 0:
            raise ConfigError(f"Prompt caps must be >= 0, got {self}")

    @classmethod
    def from_pipeline_config(cls, pipeline_config):
        section = pipeline_config['prompt']
        return cls(int(section['n_nest']), int(section['zeta']), bool(section['include_pooled']), int(section['n_inc']))


@dataclass
class TreeNode:
    node: int
    table: str
    depth: int
    children: list = field(default_factory=list)


@dataclass
class DenormTree:
    root: TreeNode
    visited: list

    def nodes(self):
        """Tree nodes in depth-first pre-order."""
        out, stack = [], [self.root]
        while stack:
            current = stack.pop()
            out.append(current)
            stack.extend(reversed(current.children))
        return out

    def node_ids(self):
        return sorted({n.node for n in self.nodes()})

    def __len__(self):
        return len(self.nodes())

    @property
    def depth(self):
        return max(n.depth for n in self.nodes())


def _linked(db, g, index, v, t_star, strict):
    """Entities joined to ``v`` through one key, grouped by table; fk -> pk and pk -> fk via the hash indexes."""
    table = g.table_of(v)
    entity = db.entities(table)[g.row_of(v)]
    spec = db.spec(table)
    groups = {}

    def admit(other_table, row):
        tau = db.entities(other_table)[row].time
        if tau < t_star or (tau == t_star and not strict):
            groups.setdefault(other_table, set()).add(g.node_id(other_table, row))

    for fk in spec.foreign_keys:
        key = entity.fkeys[fk.column]
        row = index.position(fk.target_table, key) if key is not None else None
        if row is not None:
            admit(fk.target_table, row)
    for (fk_table, column, target), refs in index.fk_index.items():
        if target == table:
            for row in refs.get(entity.pkey, ()):
                admit(fk_table, row)
    return groups


def denormalize(db, g, index, seed, t_star, n_nest, zeta, strict=False):
    """
    Breadth-first expansion of ``seed`` into a nested tree of linked entities.

    At every node, each joined table contributes up to ``n_nest`` temporally valid entities, most
    recent first (ties by larger id). Tables visited at an earlier level are not re-entered; the
    visited set grows once per level. Expansion stops at depth ``zeta``.

    :raises UnknownNode: If ``seed`` is not in the graph.
    """
    g.check_node(seed)
    root = TreeNode(seed, g.table_of(seed), 0)
    visited = [root.table]
    level = [root]
    for depth in range(1, zeta + 1):
        joined = set()
        next_level = []
        for parent in level:
            groups = _linked(db, g, index, parent.node, t_star, strict)
            for table in sorted(groups):
                if table in visited:
                    continue
                ranked = sorted(groups[table], key=lambda w: (g.time_of(w), w), reverse=True)
                for w in ranked[:n_nest]:
                    child = TreeNode(w, table, depth)
                    parent.children.append(child)
                    next_level.append(child)
                joined.add(table)
        visited.extend(sorted(joined))
        level = next_level
        if not level:
            break
    return DenormTree(root, visited)


@dataclass(frozen=True)
class PromptSlot:
    kind: str
    vector: object = None
    node: int = None
    depth: int = 0


@dataclass
class GraphPrompt:
    slots: list
    tree: DenormTree

    @property
    def vector_slots(self):
        return [s for s in self.slots if s.kind in ('vector', 'pooled')]

    def delimiters(self):
        return ''.join({'open': '(', 'close': ')'}.get(s.kind, '') for s in self.slots)

    def listing(self, g=None):
        lines = []
        for i, slot in enumerate(self.slots):
            source = '-' if slot.node is None else (f'{g.table_of(slot.node)}:{g.row_of(slot.node)}' if g else str(slot.node))
            lines.append(f'{i}\t{slot.kind}\t{source}\t{slot.depth}')
        return '\n'.join(lines) + '\n'


def build_graph_prompt(tree, projected, pooled=None, include_pooled=True):
    """
    Depth-first [OPEN, node vector, children..., CLOSE] per tree node, preceded by the pooled vector when ``include_pooled``.

    :raises MissingEmbedding: If a tree node has no projected vector.
    """
    slots = []
    if include_pooled:
        if pooled is None:
            raise MissingEmbedding("The pooled graph embedding is required when include_pooled is set")
        slots.append(PromptSlot('pooled', pooled))

    stack = [(tree.root, False)]
    while stack:
        current, closing = stack.pop()
        if closing:
            slots.append(PromptSlot('close', node=current.node, depth=current.depth))
            continue
        if current.node not in projected:
            raise MissingEmbedding(f"No projected embedding for node {current.node}")
        slots.append(PromptSlot('open', node=current.node, depth=current.depth))
        slots.append(PromptSlot('vector', projected[current.node], current.node, current.depth))
        stack.append((current, True))
        stack.extend((child, False) for child in reversed(current.children))
    return GraphPrompt(slots, tree)


@dataclass(frozen=True)
class TaskContext:
    task_id: str
    task_text: str
    question_text: str
    context_text: str = ''

    @property
    def text(self):
        """Conditioning text: the task description, any in-context examples, then the question."""
        return ' '.join(part for part in (self.task_text, self.context_text, self.question_text) if part)

    @property
    def task_tokens(self):
        return tokenize(self.task_text)

    @property
    def question_tokens(self):
        return tokenize(self.question_text)

    @property
    def tokens(self):
        return tokenize(self.text)


def _resolve(template, params, task_id):
    try:
        text = template.format(**(params or {}))
    except KeyError as e:
        raise ConfigError(f"Template for task {task_id} needs parameter {e}") from None
    leftover = [name for _, name, _, _ in string.Formatter().parse(text) if name]
    if leftover:
        raise ConfigError(f"Template for task {task_id} left placeholders unresolved: {leftover}")
    return text


def render_task_context(template_id, params=None, context_text=''):
    """
    Task description and question for a registered template.

    :raises UnknownTask: If ``template_id`` is not in the template table.
    """
    if template_id not in TASK_TEMPLATES:
        raise UnknownTask(f"No prompt template registered for task '{template_id}'")
    description, question = TASK_TEMPLATES[template_id]
    if question is None:
        instruction = FLOAT_ANSWER if template_id in REGRESSION_TEMPLATES else YES_NO
        question = f"{description.replace('This task is to predict', 'Based on the data provided, predict').rstrip('.')}. {instruction}"
    return TaskContext(template_id, _resolve(description, params, template_id), _resolve(question, params, template_id),
                       context_text)


def serialize_document(tree, db, g):
    """
    Nested JSON text of the tree: every entity's column -> value pairs, children listed under
    their table name inside the parent. Missing values are ``null``.
    """
    def render(tree_node):
        spec = db.spec(tree_node.table)
        entity = db.entities(tree_node.table)[g.row_of(tree_node.node)]
        obj = {name: Utils.json_value(value) for name, value in zip(spec.column_names, entity.attrs)}
        obj[spec.primary_key] = entity.pkey
        for column, key in entity.fkeys.items():
            obj[column] = key
        for child in tree_node.children:
            key = child.table if child.table not in spec.column_names else f'{child.table}_rows'
            obj.setdefault(key, []).append(render(child))
        return obj

    return json.dumps({tree.root.table: render(tree.root)}, separators=(',', ':'), ensure_ascii=False)


@dataclass(frozen=True)
class LabeledExample:
    node: int
    time: int
    label: float


def select_in_context_examples(train, n_inc, t_star, rng_seed=0):
    """
    Pick ``n_inc`` labeled examples with seed time strictly before ``t_star``.

    Binary labels are stratified so the class counts differ by at most one; the choice depends
    only on the candidates, ``n_inc``, ``t_star`` and the seed.

    :raises InsufficientExamples: If too few candidates precede ``t_star``.
    """
    if n_inc == 0:
        return []
    candidates = sorted((e for e in train if e.time != NEG_INF and e.time < t_star), key=lambda e: (e.time, e.node))
    if len(candidates) < n_inc:
        raise InsufficientExamples(f"Only {len(candidates)} examples precede the seed time, {n_inc} requested")
    rng = Utils.derive_rng(rng_seed, n_inc)
    labels = sorted({e.label for e in candidates})
    if len(labels) > 2 or set(labels) - {0.0, 1.0}:
        return [candidates[i] for i in sorted(rng.choice(len(candidates), size=n_inc, replace=False).tolist())]

    positives = [e for e in candidates if e.label == 1.0]
    negatives = [e for e in candidates if e.label == 0.0]
    n_pos = n_inc // 2 + (n_inc % 2 if len(positives) >= len(negatives) else 0)
    n_neg = n_inc - n_pos
    if len(positives) < n_pos or len(negatives) < n_neg:
        raise InsufficientExamples(f"Need {n_pos} positive and {n_neg} negative examples before the seed time, "
                                   f"have {len(positives)} and {len(negatives)}")
    chosen = [positives[i] for i in rng.permutation(len(positives))[:n_pos]]
    chosen += [negatives[i] for i in rng.permutation(len(negatives))[:n_neg]]
    return [chosen[i] for i in rng.permutation(len(chosen))]


def fix_in_context_examples(train, n_inc, rng_seed=0):
    """
    Draw one in-context set for every document of a task.

    The set comes from the earliest training seed times: the boundary is the first distinct
    seed time before which :func:`select_in_context_examples` succeeds. Training continues on
    the examples at or after the boundary, so every document that carries the set is later
    than all of its members and none carries its own label.

    :return: (chosen examples, remaining training examples)
    :raises InsufficientExamples: If no boundary leaves a full pick and a training example.
    """
    if n_inc == 0:
        return [], list(train)
    times = sorted({e.time for e in train if e.time != NEG_INF})
    for boundary in times[1:]:
        try:
            chosen = select_in_context_examples(train, n_inc, boundary, rng_seed)
        except InsufficientExamples:
            continue
        remaining = [e for e in train if e.time >= boundary]
        logger.info(f"Fixed {n_inc} in-context examples before {Utils.format_timestamp(boundary)}; "
                    f"{len(remaining)} of {len(train)} training examples remain")
        return chosen, remaining
    raise InsufficientExamples(f"{len(train)} training examples cannot supply {n_inc} in-context examples "
                               f"and still leave one to train on")
