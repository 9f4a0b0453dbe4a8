"""Declarative JSON query engine over a chain and its tag store.

A query is a JSON object with `level`, `select`, `where`, `group_by`,
`having`, and `clustering` keys. `where` is a predicate tree: object
keys are AND-ed implicitly, `$or` takes a list of alternatives, and
leaves compare with exact equality, `$like` (case-insensitive
substring), `$in`, or `$gt/$gte/$lt/$lte`.

Evaluation semantics (the reference test evaluator implements these
same rules independently):

* Transaction level: a transaction matches when every where clause
  holds. An `input`/`output` clause holds when at least one entity on
  that side satisfies the nested predicate; a tag predicate holds for
  an address when at least one of its tags satisfies it (exists
  semantics). With clustering enabled on a side, an address's available
  tags are the union over its cluster's members (cluster member order,
  then tag order); an address outside any cluster falls back to its own
  tags.
* Satisfying entities become the bound entities, carrying the tags
  that satisfied their tag predicate; if a side is never constrained by
  any satisfied clause, all entities on that side are bound with their
  available tags. Under `$or`, bindings from every satisfied
  alternative are merged; an alternative that binds an entity without a
  tag predicate leaves it unconstrained.
* Grouping: group paths are evaluated per bound (entity, tag) unit,
  units enumerate in entity order then tag order, and a transaction
  contributes once to every distinct group-key tuple its units form
  (cross product across sides). Units missing a requested info field
  produce no tuple.
* Aggregates per group: `count(p)` is the number of member
  transactions, `sum/min/max(input.value)` range over each member's
  bound input values (all inputs when unconstrained), `min/max(time)`
  over member timestamps, and `date_diff(a, b)` is
  floor((a - b)/86400 s). A selected non-aggregate path not in
  `group_by` evaluates against the group's first binding in chain
  order. Rows order by group-key tuple ascending.
* Without `group_by`: if any select is an aggregate, all matches form
  one group (no matches, no rows); otherwise each distinct select
  tuple per transaction is a row, in chain order.
* `time` equal to a 4-digit string means "falls in that calendar
  year"; full `YYYY-MM-DDTHH:MM:SSZ` timestamps compare exactly, and
  range operators compare chronologically (a bare year means the start
  of that year).
* Address level: rows are (address, tag) units for chain addresses —
  every tag when only selected, satisfying tags when the where has a
  tag clause, one unit per address when tags are never referenced.
  Block level works the same over blocks and their own tags.
"""

from __future__ import annotations

import ast
import csv
import io
import json
import re
from dataclasses import dataclass, field
from datetime import datetime

from .chain import ChainHandle, Transaction, format_time, parse_time
from .clustering import Clustering, ClusteringConfig, get_clustering
from .tags import TAG_TYPES, Tag, TagStore, _contains


class QueryError(ValueError):
    pass


_MISSING = object()

_COMPARE_OPS = ("$gt", "$gte", "$lt", "$lte")
_YEAR_RE = re.compile(r"^\d{4}$")
_AGG_RE = re.compile(r"^(count|sum|min|max)\(\s*([\w.]+)\s*\)$")
_DATEDIFF_RE = re.compile(
    r"^date_diff\(\s*(max|min)\(\s*([\w.]+)\s*\)\s*,"
    r"\s*(max|min)\(\s*([\w.]+)\s*\)\s*\)$")
_PATH_RE = re.compile(r"^[\w.@]+$")
_HAVING_OP_RE = re.compile(r"(>=|<=|==|!=|>|<)")

LEVELS = ("block", "transaction", "address")

_TAG_FIXED = ("type", "source", "id")


# ---------------------------------------------------------------------------
# Parsed query representation


@dataclass(frozen=True)
class FieldRef:
    path: str

    @property
    def text(self) -> str:
        return self.path


@dataclass(frozen=True)
class Aggregate:
    fn: str  # count | sum | min | max
    path: str

    @property
    def text(self) -> str:
        return f"{self.fn}({self.path})"


@dataclass(frozen=True)
class DateDiff:
    left: Aggregate
    right: Aggregate

    @property
    def text(self) -> str:
        return f"date_diff({self.left.text}, {self.right.text})"


@dataclass(frozen=True)
class SelectItem:
    expr: FieldRef | Aggregate | DateDiff
    alias: str | None = None

    @property
    def name(self) -> str:
        return self.alias if self.alias is not None else self.expr.text


@dataclass(frozen=True)
class Having:
    aggregate: Aggregate | DateDiff
    op: str
    threshold: int | float


@dataclass(frozen=True)
class Query:
    level: str
    selects: tuple[SelectItem, ...]
    where: dict
    group_by: tuple[str, ...]
    having: Having | None = None
    clustering: ClusteringConfig | None = None


# ---------------------------------------------------------------------------
# Field-path schema


def _is_tag_path(path: str, prefix: str) -> bool:
    if not path.startswith(prefix + "."):
        return False
    rest = path[len(prefix) + 1:]
    return rest in _TAG_FIXED or rest == "info" or rest.startswith("info.")


def _valid_path(level: str, path: str) -> bool:
    if level == "transaction":
        if path in ("time", "self.txes", "input.value", "output.value"):
            return True
        return (_is_tag_path(path, "input.address.tag")
                or _is_tag_path(path, "output.address.tag"))
    if level == "address":
        return path == "self.address" or _is_tag_path(path, "tag")
    if level == "block":
        if path in ("self.height", "self.hash", "self.txes", "time"):
            return True
        return _is_tag_path(path, "tag")
    raise QueryError(f"unknown level {level!r}")


def _check_path(level: str, path: str, where_: str):
    if not _valid_path(level, path):
        raise QueryError(f"{where_}: unknown field path {path!r} "
                         f"for level {level!r}")


_NUMERIC_PATHS = {
    "transaction": lambda p: p in ("input.value", "output.value"),
    "address": lambda p: p.startswith("tag.info."),
    "block": lambda p: p == "self.height" or p.startswith("tag.info."),
}
_TIME_PATHS = {
    "transaction": lambda p: p == "time",
    "address": lambda p: False,
    "block": lambda p: p == "time",
}


def _root_of(path: str) -> str:
    head = path.split(".", 1)[0]
    if head in ("input", "output", "tag"):
        return head
    return "self"


# ---------------------------------------------------------------------------
# Parsing


def _eval_const(text: str) -> int | float:
    """Constant arithmetic on the right-hand side of `having`:
    numbers with + - * ** and parentheses."""
    try:
        node = ast.parse(text, mode="eval").body
    except SyntaxError:
        raise QueryError(f"malformed constant expression {text!r}") from None

    def walk(n):
        if isinstance(n, ast.Constant) and isinstance(n.value, (int, float)) \
                and not isinstance(n.value, bool):
            return n.value
        if isinstance(n, ast.BinOp) and isinstance(
                n.op, (ast.Add, ast.Sub, ast.Mult, ast.Pow)):
            a, b = walk(n.left), walk(n.right)
            if isinstance(n.op, ast.Add):
                return a + b
            if isinstance(n.op, ast.Sub):
                return a - b
            if isinstance(n.op, ast.Mult):
                return a * b
            return a ** b
        if isinstance(n, ast.UnaryOp) and isinstance(n.op, (ast.USub, ast.UAdd)):
            v = walk(n.operand)
            return -v if isinstance(n.op, ast.USub) else v
        raise QueryError(f"unsupported constant expression {text!r}")

    return walk(node)


def _parse_aggregate(text: str, level: str) -> Aggregate | DateDiff | None:
    m = _DATEDIFF_RE.match(text)
    if m:
        left = Aggregate(m.group(1), m.group(2))
        right = Aggregate(m.group(3), m.group(4))
        for agg in (left, right):
            _check_path(level, agg.path, "date_diff")
            if not _TIME_PATHS[level](agg.path):
                raise QueryError(f"date_diff requires time paths, "
                                 f"got {agg.path!r}")
        return DateDiff(left, right)
    m = _AGG_RE.match(text)
    if not m:
        return None
    fn, path = m.group(1), m.group(2)
    _check_path(level, path, f"{fn}()")
    if fn == "sum" and not _NUMERIC_PATHS[level](path):
        raise QueryError(f"sum() requires a numeric path, got {path!r}")
    if fn in ("min", "max") and not (
            _NUMERIC_PATHS[level](path) or _TIME_PATHS[level](path)):
        raise QueryError(f"{fn}() requires a numeric or time path, "
                         f"got {path!r}")
    return Aggregate(fn, path)


def _parse_select(entry: str, level: str) -> SelectItem:
    if not isinstance(entry, str):
        raise QueryError(f"select entries must be strings, got {entry!r}")
    text = entry.strip()
    alias = None
    m = re.search(r"\s+as\s+(@?\w+)\s*$", text)
    if m:
        alias = m.group(1)
        text = text[:m.start()].strip()
    agg = _parse_aggregate(text, level)
    if agg is not None:
        return SelectItem(expr=agg, alias=alias)
    if not _PATH_RE.match(text) or "(" in text:
        raise QueryError(f"malformed select expression {entry!r}")
    _check_path(level, text, "select")
    return SelectItem(expr=FieldRef(text), alias=alias)


def _parse_having(text: str, level: str) -> Having:
    if not isinstance(text, str):
        raise QueryError("having must be a string expression")
    m = _HAVING_OP_RE.search(text)
    if not m:
        raise QueryError(f"having needs a comparison operator: {text!r}")
    lhs, op, rhs = text[:m.start()].strip(), m.group(1), text[m.end():].strip()
    agg = _parse_aggregate(lhs, level)
    if agg is None:
        raise QueryError(f"having left side must be an aggregate: {lhs!r}")
    return Having(aggregate=agg, op=op, threshold=_eval_const(rhs))


# --- where validation -------------------------------------------------------


def _validate_scalar_or_ops(pred, crumb: str, *, ops: tuple[str, ...],
                            scalar_types: tuple[type, ...]):
    if isinstance(pred, dict):
        dollar = [k for k in pred if isinstance(k, str) and k.startswith("$")]
        plain = [k for k in pred if k not in dollar]
        if plain:
            raise QueryError(f"{crumb}: unexpected keys {plain}")
        for k, v in pred.items():
            if k == "$or":
                if not isinstance(v, list):
                    raise QueryError(f"{crumb}.$or must be a list")
                for i, alt in enumerate(v):
                    _validate_scalar_or_ops(alt, f"{crumb}.$or[{i}]",
                                            ops=ops, scalar_types=scalar_types)
            elif k in ops:
                _validate_op_arg(k, v, crumb)
            else:
                raise QueryError(f"{crumb}: unknown operator {k!r}")
        return
    if not isinstance(pred, scalar_types):
        raise QueryError(f"{crumb}: unsupported constant {pred!r}")


def _validate_op_arg(op: str, arg, crumb: str):
    if op == "$like":
        if not isinstance(arg, str):
            raise QueryError(f"{crumb}.$like needs a string")
    elif op == "$in":
        if not isinstance(arg, list):
            raise QueryError(f"{crumb}.$in needs a list")
    elif op in _COMPARE_OPS:
        if isinstance(arg, bool) or not isinstance(arg, (int, float, str)):
            raise QueryError(f"{crumb}.{op} needs a number or timestamp")
        if isinstance(arg, str):
            _validate_time_value(arg, crumb)
    else:
        raise QueryError(f"{crumb}: unknown operator {op!r}")


def _validate_value_pred(pred, crumb: str):
    """Generic predicate over a JSON value (tag info and below)."""
    if isinstance(pred, dict):
        dollar = [k for k in pred if isinstance(k, str) and k.startswith("$")]
        plain = [k for k in pred if k not in dollar]
        if dollar and plain:
            raise QueryError(f"{crumb}: cannot mix operators {dollar} "
                             f"with field keys {plain}")
        if dollar:
            for k, v in pred.items():
                if k == "$or":
                    if not isinstance(v, list):
                        raise QueryError(f"{crumb}.$or must be a list")
                    for i, alt in enumerate(v):
                        _validate_value_pred(alt, f"{crumb}.$or[{i}]")
                else:
                    _validate_op_arg(k, v, crumb)
        else:
            for k, v in pred.items():
                _validate_value_pred(v, f"{crumb}.{k}")
        return
    if isinstance(pred, bool) or pred is None or isinstance(pred, (int, float, str)):
        return
    raise QueryError(f"{crumb}: unsupported constant {pred!r}")


def _validate_time_value(value, crumb: str):
    if not isinstance(value, str):
        raise QueryError(f"{crumb}: time compares against strings")
    if _YEAR_RE.match(value):
        return
    try:
        parse_time(value)
    except ValueError:
        raise QueryError(f"{crumb}: bad timestamp {value!r} "
                         "(use YYYY or YYYY-MM-DDTHH:MM:SSZ)") from None


def _validate_time_pred(pred, crumb: str):
    if isinstance(pred, dict):
        for k, v in pred.items():
            if k == "$or":
                if not isinstance(v, list):
                    raise QueryError(f"{crumb}.$or must be a list")
                for i, alt in enumerate(v):
                    _validate_time_pred(alt, f"{crumb}.$or[{i}]")
            elif k in _COMPARE_OPS:
                _validate_time_value(v, f"{crumb}.{k}")
            elif k == "$in":
                if not isinstance(v, list):
                    raise QueryError(f"{crumb}.$in needs a list")
                for item in v:
                    _validate_time_value(item, f"{crumb}.$in")
            else:
                raise QueryError(f"{crumb}: unknown operator {k!r}")
        return
    _validate_time_value(pred, crumb)


def _validate_tag_pred(pred, crumb: str):
    if not isinstance(pred, dict):
        raise QueryError(f"{crumb}: tag predicate must be an object")
    for k, v in pred.items():
        if k == "$or":
            if not isinstance(v, list):
                raise QueryError(f"{crumb}.$or must be a list")
            for i, alt in enumerate(v):
                _validate_tag_pred(alt, f"{crumb}.$or[{i}]")
        elif k in ("type", "source", "id"):
            _validate_scalar_or_ops(v, f"{crumb}.{k}", ops=("$like", "$in"),
                                    scalar_types=(str,))
        elif k == "info":
            _validate_value_pred(v, f"{crumb}.info")
        else:
            raise QueryError(f"{crumb}: unknown tag field {k!r}")


def _validate_address_pred(pred, crumb: str):
    if not isinstance(pred, dict):
        raise QueryError(f"{crumb}: address predicate must be an object")
    for k, v in pred.items():
        if k == "$or":
            for i, alt in enumerate(v if isinstance(v, list) else ()):
                _validate_address_pred(alt, f"{crumb}.$or[{i}]")
            if not isinstance(v, list):
                raise QueryError(f"{crumb}.$or must be a list")
        elif k == "tag":
            _validate_tag_pred(v, f"{crumb}.tag")
        else:
            raise QueryError(f"{crumb}: unknown address field {k!r}")


def _validate_entity_pred(pred, crumb: str):
    if not isinstance(pred, dict):
        raise QueryError(f"{crumb}: entity predicate must be an object")
    for k, v in pred.items():
        if k == "$or":
            if not isinstance(v, list):
                raise QueryError(f"{crumb}.$or must be a list")
            for i, alt in enumerate(v):
                _validate_entity_pred(alt, f"{crumb}.$or[{i}]")
        elif k == "address":
            _validate_address_pred(v, f"{crumb}.address")
        elif k == "value":
            _validate_scalar_or_ops(v, f"{crumb}.value", ops=_COMPARE_OPS + ("$in",),
                                    scalar_types=(int,))
        else:
            raise QueryError(f"{crumb}: unknown entity field {k!r}")


def validate_where(level: str, node, crumb: str = "where"):
    if not isinstance(node, dict):
        raise QueryError(f"{crumb}: must be an object")
    for k, v in node.items():
        if k == "$or":
            if not isinstance(v, list):
                raise QueryError(f"{crumb}.$or must be a list")
            for i, alt in enumerate(v):
                validate_where(level, alt, f"{crumb}.$or[{i}]")
        elif level == "transaction" and k in ("input", "output"):
            _validate_entity_pred(v, f"{crumb}.{k}")
        elif level in ("transaction", "block") and k == "time":
            _validate_time_pred(v, f"{crumb}.time")
        elif level in ("address", "block") and k == "tag":
            _validate_tag_pred(v, f"{crumb}.tag")
        elif level == "address" and k == "self.address":
            _validate_scalar_or_ops(v, f"{crumb}.self.address",
                                    ops=("$like", "$in"), scalar_types=(str,))
        elif level == "block" and k == "self.height":
            _validate_scalar_or_ops(v, f"{crumb}.self.height",
                                    ops=_COMPARE_OPS + ("$in",),
                                    scalar_types=(int,))
        else:
            raise QueryError(f"{crumb}: unknown field {k!r} for "
                             f"level {level!r}")


def parse_query(spec: dict) -> Query:
    """Validate a JSON query object into a Query.

    Raises QueryError naming the offending key for unknown paths,
    unknown operators, malformed aggregates, or `having` without
    `group_by`.
    """
    if not isinstance(spec, dict):
        raise QueryError("query must be a JSON object")
    unknown = set(spec) - {"level", "select", "where", "group_by",
                           "having", "clustering"}
    if unknown:
        raise QueryError(f"unknown query keys: {sorted(unknown)}")

    level = spec.get("level")
    if level not in LEVELS:
        raise QueryError(f"level must be one of {LEVELS}, got {level!r}")

    select = spec.get("select")
    if isinstance(select, str):
        select = [select]
    if not isinstance(select, list) or not select:
        raise QueryError("select must be a non-empty list (or one string)")
    selects = tuple(_parse_select(s, level) for s in select)

    group_by = spec.get("group_by", [])
    if isinstance(group_by, str):
        group_by = [group_by]
    if not isinstance(group_by, list):
        raise QueryError("group_by must be a list (or one string)")
    for p in group_by:
        if not isinstance(p, str):
            raise QueryError(f"group_by entries must be strings, got {p!r}")
        _check_path(level, p, "group_by")
        if p == "self.txes":
            raise QueryError("cannot group by self.txes")
    group_by = tuple(group_by)

    having = None
    if "having" in spec and spec["having"] is not None:
        if not group_by:
            raise QueryError("having requires group_by")
        having = _parse_having(spec["having"], level)

    where = spec.get("where", {})
    validate_where(level, where)

    clustering = None
    if "clustering" in spec and spec["clustering"] is not None:
        c = spec["clustering"]
        if not isinstance(c, dict) or set(c) != {"source", "method"}:
            raise QueryError("clustering must be {'source':..., 'method':...}")
        if level != "transaction":
            raise QueryError("clustering applies to transaction-level queries")
        try:
            clustering = ClusteringConfig(source=c["source"], method=c["method"])
        except ValueError as e:
            raise QueryError(str(e)) from None

    return Query(level=level, selects=selects, where=where,
                 group_by=group_by, having=having, clustering=clustering)


def load_query(text: str) -> Query:
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as e:
        raise QueryError(f"query is not valid JSON: {e.msg}") from None
    return parse_query(spec)


# ---------------------------------------------------------------------------
# Predicate evaluation


def _scalar_eq(value, constant) -> bool:
    if isinstance(value, bool) != isinstance(constant, bool):
        return False
    return value == constant


def _eval_value_pred(value, pred) -> bool:
    if isinstance(pred, dict):
        dollar = any(isinstance(k, str) and k.startswith("$") for k in pred)
        if dollar:
            for k, arg in pred.items():
                if k == "$or":
                    if not any(_eval_value_pred(value, alt) for alt in arg):
                        return False
                elif k == "$like":
                    if not _contains(value, arg.lower()):
                        return False
                elif k == "$in":
                    if not any(_scalar_eq(value, item) for item in arg):
                        return False
                elif k in _COMPARE_OPS:
                    if not _numeric_compare(value, k, arg):
                        return False
                else:
                    return False
            return True
        if not isinstance(value, dict):
            return False
        return all(k in value and _eval_value_pred(value[k], sub)
                   for k, sub in pred.items())
    return _scalar_eq(value, pred)


def _numeric_compare(value, op: str, arg) -> bool:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    if op == "$gt":
        return value > arg
    if op == "$gte":
        return value >= arg
    if op == "$lt":
        return value < arg
    return value <= arg


def _eval_tag_pred(tag: Tag, pred: dict) -> bool:
    for k, sub in pred.items():
        if k == "$or":
            if not any(_eval_tag_pred(tag, alt) for alt in sub):
                return False
        elif k == "info":
            if not _eval_value_pred(tag.info, sub):
                return False
        else:
            value = {"type": tag.type, "source": tag.source, "id": tag.id}[k]
            if not _eval_value_pred(value, sub):
                return False
    return True


def _time_bound(value: str) -> datetime:
    if _YEAR_RE.match(value):
        return parse_time(f"{value}-01-01T00:00:00Z")
    return parse_time(value)


def _eval_time_pred(ts: datetime, pred) -> bool:
    if isinstance(pred, dict):
        for k, arg in pred.items():
            if k == "$or":
                if not any(_eval_time_pred(ts, alt) for alt in arg):
                    return False
            elif k == "$in":
                if not any(_eval_time_pred(ts, item) for item in arg):
                    return False
            elif k in _COMPARE_OPS:
                bound = _time_bound(arg)
                ok = {"$gt": ts > bound, "$gte": ts >= bound,
                      "$lt": ts < bound, "$lte": ts <= bound}[k]
                if not ok:
                    return False
            else:
                return False
        return True
    if _YEAR_RE.match(pred):
        return ts.year == int(pred)
    return ts == parse_time(pred)


# ---------------------------------------------------------------------------
# Transaction matching and binding


@dataclass
class MatchedTx:
    tx: Transaction
    # (entity, satisfying tags) per bound entity; tags is None when the
    # entity matched without a tag constraint.
    bound_inputs: list
    bound_outputs: list


class _TagContext:
    def __init__(self, store: TagStore, clustering: Clustering | None,
                 config: ClusteringConfig | None):
        self._store = store
        self._clustering = clustering
        cover = config.source if config else None
        self._cover_inputs = cover in ("inputs", "both")
        self._cover_outputs = cover in ("outputs", "both")
        self._cluster_cache: dict[str, tuple[Tag, ...]] = {}

    def available_tags(self, address: str, side: str) -> tuple[Tag, ...]:
        covered = self._cover_inputs if side == "input" else self._cover_outputs
        if not covered or self._clustering is None:
            return self._store.tags_for("address", address)
        members = self._clustering.members_of(address)
        if not members:
            return self._store.tags_for("address", address)
        cached = self._cluster_cache.get(members[0])
        if cached is None:
            tags: list[Tag] = []
            for member in members:
                tags.extend(self._store.tags_for("address", member))
            cached = tuple(tags)
            self._cluster_cache[members[0]] = cached
        return cached


def _merge_tags(a, b):
    """Merge two binding-tag sets; None (unconstrained) dominates."""
    if a is None or b is None:
        return None
    merged = list(a)
    for t in b:
        if t not in merged:
            merged.append(t)
    return tuple(merged)


def _eval_entity_pred(entity, side: str, pred: dict, ctx: _TagContext):
    """Returns (ok, tags) for one input/output entity; tags is None when
    no tag predicate constrained the entity."""
    ok = True
    tags = None
    saw_tag_pred = False
    for k, sub in pred.items():
        if k == "$or":
            alt_ok = False
            alt_tags = None
            alt_unconstrained = False
            for alt in sub:
                a_ok, a_tags = _eval_entity_pred(entity, side, alt, ctx)
                if a_ok:
                    alt_ok = True
                    if a_tags is None:
                        alt_unconstrained = True
                    else:
                        alt_tags = _merge_tags_keep(alt_tags, a_tags)
            if not alt_ok:
                return False, None
            if not alt_unconstrained and alt_tags is not None:
                saw_tag_pred = True
                tags = _merge_tags_keep(tags, alt_tags)
        elif k == "address":
            a_ok, a_tags, a_saw = _eval_address_pred(entity.address, side, sub, ctx)
            if not a_ok:
                return False, None
            if a_saw:
                saw_tag_pred = True
                tags = _merge_tags_keep(tags, a_tags)
        elif k == "value":
            if not _eval_value_pred(entity.value, sub):
                return False, None
        else:
            return False, None
    return True, (tags if saw_tag_pred else None)


def _merge_tags_keep(a, b):
    """Union of two tag tuples (order-preserving); None means empty here."""
    if a is None:
        return b
    if b is None:
        return a
    merged = list(a)
    for t in b:
        if t not in merged:
            merged.append(t)
    return tuple(merged)


def _eval_address_pred(address: str, side: str, pred: dict, ctx: _TagContext):
    ok = True
    tags = None
    saw_tag_pred = False
    for k, sub in pred.items():
        if k == "$or":
            alt_ok = False
            alt_tags = None
            alt_unconstrained = False
            for alt in sub:
                a_ok, a_tags, a_saw = _eval_address_pred(address, side, alt, ctx)
                if a_ok:
                    alt_ok = True
                    if not a_saw:
                        alt_unconstrained = True
                    else:
                        alt_tags = _merge_tags_keep(alt_tags, a_tags)
            if not alt_ok:
                return False, None, False
            if not alt_unconstrained and alt_tags is not None:
                saw_tag_pred = True
                tags = _merge_tags_keep(tags, alt_tags)
        elif k == "tag":
            saw_tag_pred = True
            sat = tuple(t for t in ctx.available_tags(address, side)
                        if _eval_tag_pred(t, sub))
            if not sat:
                return False, None, True
            tags = _merge_tags_keep(tags, sat)
        else:
            return False, None, False
    return ok, tags, saw_tag_pred


def _eval_tx_node(tx: Transaction, node: dict, ctx: _TagContext):
    """Returns (ok, input_bindings, output_bindings); bindings map
    entity index -> tags (None = unconstrained)."""
    in_b: dict[int, tuple | None] = {}
    out_b: dict[int, tuple | None] = {}
    for k, sub in node.items():
        if k == "$or":
            any_ok = False
            for alt in sub:
                a_ok, a_in, a_out = _eval_tx_node(tx, alt, ctx)
                if a_ok:
                    any_ok = True
                    _merge_bindings(in_b, a_in)
                    _merge_bindings(out_b, a_out)
            if not any_ok:
                return False, {}, {}
        elif k in ("input", "output"):
            entities = tx.inputs if k == "input" else tx.outputs
            clause_b: dict[int, tuple | None] = {}
            for idx, entity in enumerate(entities):
                ok, tags = _eval_entity_pred(entity, k, sub, ctx)
                if ok:
                    clause_b[idx] = tags
            if not clause_b:
                return False, {}, {}
            _merge_bindings(in_b if k == "input" else out_b, clause_b)
        elif k == "time":
            if not _eval_time_pred(tx.time, sub):
                return False, {}, {}
        else:
            return False, {}, {}
    return True, in_b, out_b


def _merge_bindings(into: dict, new: dict):
    for idx, tags in new.items():
        if idx in into:
            into[idx] = _merge_tags(into[idx], tags)
        else:
            into[idx] = tags


def match_transactions(chain: ChainHandle, store: TagStore, where: dict,
                       clustering: ClusteringConfig | None = None) -> list[MatchedTx]:
    """All transactions satisfying a where tree, with bound entities.

    Unconstrained sides bind every entity with tags=None; consumers
    resolve None to the address's available tags on demand.
    """
    validate_where("transaction", where)
    cl = get_clustering(chain, clustering) if clustering else None
    ctx = _TagContext(store, cl, clustering)
    out = []
    for tx in chain.iter_transactions():
        ok, in_b, out_b = _eval_tx_node(tx, where, ctx)
        if not ok:
            continue
        bound_inputs = ([(tx.inputs[i], in_b[i]) for i in sorted(in_b)]
                        if in_b else [(e, None) for e in tx.inputs])
        bound_outputs = ([(tx.outputs[i], out_b[i]) for i in sorted(out_b)]
                         if out_b else [(e, None) for e in tx.outputs])
        out.append(MatchedTx(tx=tx, bound_inputs=bound_inputs,
                             bound_outputs=bound_outputs))
    return out, ctx


# ---------------------------------------------------------------------------
# Grouping, aggregation, selection


def _tag_subvalue(tag: Tag, subpath: str):
    if subpath == "type":
        return tag.type
    if subpath == "source":
        return tag.source
    if subpath == "id":
        return tag.id
    if subpath == "info":
        return tag.info
    value = tag.info
    for part in subpath.split(".")[1:]:
        if not isinstance(value, dict) or part not in value:
            return _MISSING
        value = value[part]
    return value


def _units_for_root(m: MatchedTx, root: str, need_tag: bool, ctx: _TagContext):
    """Enumerate (entity, tag) units for one root in canonical order."""
    if root == "self":
        return [(m.tx, None)]
    bound = m.bound_inputs if root == "input" else m.bound_outputs
    units = []
    for entity, tags in bound:
        if not need_tag:
            units.append((entity, None))
            continue
        if tags is None:
            tags = ctx.available_tags(entity.address, root)
        for tag in tags:
            units.append((entity, tag))
    return units


def _eval_path_on_unit(path: str, root: str, unit, m: MatchedTx,
                       ctx: _TagContext):
    entity, tag = unit
    if root == "self":
        if path == "time":
            return m.tx.time
        if path == "self.txes":
            return [m.tx.hash]
        raise QueryError(f"cannot evaluate {path!r} here")
    rest = path.split(".", 1)[1]  # drop input/output prefix
    if rest == "value":
        return entity.value
    # address.tag.<sub>
    sub = rest.split(".", 2)[2]
    if tag is None:
        available = ctx.available_tags(entity.address, root)
        if not available:
            return _MISSING
        tag = available[0]
    return _tag_subvalue(tag, sub)


def _path_needs_tag(path: str) -> bool:
    return ".tag." in path or path.startswith("tag.")


@dataclass
class _Group:
    key: tuple
    members: list = field(default_factory=list)  # MatchedTx, appended once
    first: tuple | None = None  # (MatchedTx, {root: unit})


def _group_combos(m: MatchedTx, paths: tuple[str, ...], ctx: _TagContext):
    """Yield (key_tuple, {root: unit}) combos for one matched tx."""
    roots: list[str] = []
    for p in paths:
        r = _root_of(p)
        if r not in roots:
            roots.append(r)
    per_root_units = {}
    for r in roots:
        need_tag = any(_path_needs_tag(p) for p in paths if _root_of(p) == r)
        per_root_units[r] = _units_for_root(m, r, need_tag, ctx)
        if not per_root_units[r]:
            return

    def rec(i, chosen):
        if i == len(roots):
            key = []
            for p in paths:
                v = _eval_path_on_unit(p, _root_of(p), chosen[_root_of(p)], m, ctx)
                if v is _MISSING:
                    return
                key.append(v)
            yield tuple(key), dict(chosen)
            return
        r = roots[i]
        for unit in per_root_units[r]:
            chosen[r] = unit
            yield from rec(i + 1, chosen)
        del chosen[r]

    yield from rec(0, {})


def _hashable(value):
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True)
    if isinstance(value, list):
        return tuple(_hashable(v) for v in value)
    return value


def _ordering_key(value):
    if isinstance(value, bool):
        return (0, float(value))
    if isinstance(value, (int, float)):
        return (0, float(value))
    if isinstance(value, str):
        return (1, value)
    if isinstance(value, datetime):
        return (2, value.isoformat())
    return (3, repr(value))


def _bound_values(members: list[MatchedTx], side: str) -> list[int]:
    values = []
    for m in members:
        bound = m.bound_inputs if side == "input" else m.bound_outputs
        values.extend(entity.value for entity, _ in bound)
    return values


def _eval_aggregate(agg, members: list[MatchedTx], level: str,
                    group_rows: list | None = None):
    if isinstance(agg, DateDiff):
        a = _eval_aggregate(agg.left, members, level, group_rows)
        b = _eval_aggregate(agg.right, members, level, group_rows)
        if a is None or b is None:
            return None
        return date_diff(a, b)
    fn, path = agg.fn, agg.path
    if level == "transaction":
        if fn == "count":
            return len(members)
        if path == "time":
            times = [m.tx.time for m in members]
            return min(times) if fn == "min" else max(times)
        side = "input" if path.startswith("input.") else "output"
        values = _bound_values(members, side)
        if not values:
            return None
        if fn == "sum":
            return sum(values)
        return min(values) if fn == "min" else max(values)
    # address/block levels aggregate over the group's units
    if fn == "count":
        return len(group_rows)
    values = []
    for unit_value in group_rows:
        v = unit_value.get(path, _MISSING)
        if v is _MISSING or isinstance(v, bool):
            continue
        if isinstance(v, (int, float)):
            values.append(v)
    if not values:
        return None
    if fn == "sum":
        return sum(values)
    return min(values) if fn == "min" else max(values)


def date_diff(a: datetime, b: datetime) -> int:
    """Whole days between two timestamps: floor((a-b) / 86400 s)."""
    return int((a - b).total_seconds() // 86400)


def _exec_transaction(chain: ChainHandle, store: TagStore, query: Query):
    matches, ctx = match_transactions(chain, store, query.where,
                                      query.clustering)
    columns = tuple(s.name for s in query.selects)

    if not query.group_by:
        has_agg = any(not isinstance(s.expr, FieldRef) for s in query.selects)
        if has_agg:
            if not matches:
                return ResultSet(columns=columns, rows=())
            row = tuple(_select_value(s, (), None, matches, "transaction", ctx)
                        for s in query.selects)
            return ResultSet(columns=columns, rows=(row,))
        rows = []
        paths = tuple(s.expr.path for s in query.selects)
        for m in matches:
            seen = set()
            for key, units in _group_combos(m, paths, ctx):
                hk = tuple(_hashable(v) for v in key)
                if hk in seen:
                    continue
                seen.add(hk)
                rows.append(tuple(key))
        return ResultSet(columns=columns, rows=tuple(rows))

    groups: dict[tuple, _Group] = {}
    for m in matches:
        seen = set()
        for key, units in _group_combos(m, query.group_by, ctx):
            hk = tuple(_hashable(v) for v in key)
            if hk in seen:
                continue
            seen.add(hk)
            g = groups.get(hk)
            if g is None:
                g = _Group(key=key, first=(m, units))
                groups[hk] = g
            g.members.append(m)

    selected = []
    for hk in sorted(groups, key=lambda k: tuple(_ordering_key(v) for v in k)):
        g = groups[hk]
        if query.having is not None:
            actual = _eval_aggregate(query.having.aggregate, g.members,
                                     "transaction")
            if not _compare(actual, query.having.op, query.having.threshold):
                continue
        row = tuple(_select_value(s, g.key, g, g.members, "transaction", ctx,
                                  group_by=query.group_by)
                    for s in query.selects)
        selected.append(row)
    return ResultSet(columns=columns, rows=tuple(selected))


def _select_value(item: SelectItem, key: tuple, group: "_Group | None",
                  members: list[MatchedTx], level: str, ctx: _TagContext,
                  group_by: tuple[str, ...] = ()):
    expr = item.expr
    if isinstance(expr, (Aggregate, DateDiff)):
        return _eval_aggregate(expr, members, level)
    path = expr.path
    if path == "self.txes":
        return [m.tx.hash for m in members]
    if path in group_by:
        return key[group_by.index(path)]
    # Representative value: the group's first binding in chain order.
    if group is not None and group.first is not None:
        m, units = group.first
    elif members:
        m, units = members[0], {}
    else:
        return None
    root = _root_of(path)
    unit = units.get(root)
    if unit is None:
        need_tag = _path_needs_tag(path)
        candidates = _units_for_root(m, root, need_tag, ctx)
        if not candidates:
            return None
        unit = candidates[0]
    v = _eval_path_on_unit(path, root, unit, m, ctx)
    return None if v is _MISSING else v


def _compare(actual, op: str, threshold) -> bool:
    if actual is None:
        return False
    if op == ">=":
        return actual >= threshold
    if op == ">":
        return actual > threshold
    if op == "<=":
        return actual <= threshold
    if op == "<":
        return actual < threshold
    if op == "==":
        return actual == threshold
    return actual != threshold


# --- address/block level ----------------------------------------------------


def _exec_entity_level(chain: ChainHandle, store: TagStore, query: Query):
    level = query.level
    references_tag = any(
        k == "tag" for k in _iter_where_keys(query.where)
    ) or any(_path_needs_tag(p) for p in _all_paths(query))

    units: list[dict] = []  # each: {path: value} plus hidden entity info
    if level == "address":
        entities = chain.addresses
    else:
        entities = chain.blocks

    for entity in entities:
        own_tags = (store.tags_for("address", entity) if level == "address"
                    else store.tags_for("block", str(entity.height)))
        tag_units = [None]
        if references_tag:
            if not own_tags:
                continue
            tag_units = list(own_tags)
        for tag in tag_units:
            if not _eval_entity_where(entity, tag, query.where, level):
                continue
            units.append(_unit_values(entity, tag, level))

    columns = tuple(s.name for s in query.selects)

    def value_of(unit: dict, path: str):
        return unit.get(path, _MISSING)

    if not query.group_by:
        has_agg = any(not isinstance(s.expr, FieldRef) for s in query.selects)
        if has_agg:
            if not units:
                return ResultSet(columns=columns, rows=())
            row = tuple(_entity_select(s, (), units, ()) for s in query.selects)
            return ResultSet(columns=columns, rows=(row,))
        rows = []
        seen_by_entity: dict[int, set] = {}
        for unit in units:
            values = tuple(value_of(unit, s.expr.path) for s in query.selects)
            if any(v is _MISSING for v in values):
                continue
            rows.append(values)
        return ResultSet(columns=columns, rows=tuple(rows))

    groups: dict[tuple, list[dict]] = {}
    keys: dict[tuple, tuple] = {}
    for unit in units:
        key = tuple(value_of(unit, p) for p in query.group_by)
        if any(v is _MISSING for v in key):
            continue
        hk = tuple(_hashable(v) for v in key)
        groups.setdefault(hk, []).append(unit)
        keys.setdefault(hk, key)

    selected = []
    for hk in sorted(groups, key=lambda k: tuple(_ordering_key(v) for v in k)):
        group_units = groups[hk]
        key = keys[hk]
        if query.having is not None:
            actual = _eval_aggregate(query.having.aggregate, [], level,
                                     group_rows=group_units)
            if not _compare(actual, query.having.op, query.having.threshold):
                continue
        row = tuple(_entity_select(s, key, group_units, query.group_by)
                    for s in query.selects)
        selected.append(row)
    return ResultSet(columns=columns, rows=tuple(selected))


def _entity_select(item: SelectItem, key: tuple, group_units: list[dict],
                   group_by: tuple[str, ...]):
    expr = item.expr
    if isinstance(expr, (Aggregate, DateDiff)):
        return _eval_aggregate(expr, [], "address", group_rows=group_units)
    path = expr.path
    if path in group_by:
        return key[group_by.index(path)]
    if path == "self.txes":
        out = []
        for unit in group_units:
            out.extend(unit.get("self.txes", []))
        return list(dict.fromkeys(out))
    v = group_units[0].get(path, _MISSING)
    return None if v is _MISSING else v


def _unit_values(entity, tag: Tag | None, level: str) -> dict:
    values: dict = {}
    if level == "address":
        values["self.address"] = entity
    else:
        values["self.height"] = entity.height
        values["self.hash"] = entity.hash
        values["time"] = entity.time
        values["self.txes"] = [t.hash for t in entity.transactions]
    if tag is not None:
        values["tag.type"] = tag.type
        values["tag.source"] = tag.source
        values["tag.id"] = tag.id
        values["tag.info"] = tag.info
        for key, v in _flatten_info(tag.info):
            values[f"tag.info.{key}"] = v
    return values


def _flatten_info(info: dict, prefix: str = ""):
    for k, v in info.items():
        path = f"{prefix}{k}"
        yield path, v
        if isinstance(v, dict):
            yield from _flatten_info(v, prefix=f"{path}.")


def _eval_entity_where(entity, tag: Tag | None, node: dict, level: str) -> bool:
    for k, sub in node.items():
        if k == "$or":
            if not any(_eval_entity_where(entity, tag, alt, level)
                       for alt in sub):
                return False
        elif k == "tag":
            if tag is None or not _eval_tag_pred(tag, sub):
                return False
        elif k == "self.address":
            if not _eval_value_pred(entity, sub):
                return False
        elif k == "time":
            if not _eval_time_pred(entity.time, sub):
                return False
        elif k == "self.height":
            if not _eval_value_pred(entity.height, sub):
                return False
        else:
            return False
    return True


def _iter_where_keys(node: dict):
    for k, v in node.items():
        if k == "$or":
            for alt in v:
                yield from _iter_where_keys(alt)
        else:
            yield k


def _all_paths(query: Query):
    for s in query.selects:
        if isinstance(s.expr, FieldRef):
            yield s.expr.path
        elif isinstance(s.expr, Aggregate):
            yield s.expr.path
        else:
            yield s.expr.left.path
            yield s.expr.right.path
    yield from query.group_by
    if query.having is not None:
        agg = query.having.aggregate
        if isinstance(agg, Aggregate):
            yield agg.path
        else:
            yield agg.left.path
            yield agg.right.path


# ---------------------------------------------------------------------------
# Result sets


@dataclass(frozen=True)
class ResultSet:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def __len__(self):
        return len(self.rows)

    def row_dicts(self) -> list[dict]:
        return [dict(zip(self.columns, row)) for row in self.rows]

    def column(self, name: str) -> list:
        idx = self.columns.index(name)
        return [row[idx] for row in self.rows]

    def rendered_rows(self) -> list[dict]:
        return [{c: _render_value(v) for c, v in zip(self.columns, row)}
                for row in self.rows]

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.rendered_rows(), indent=indent,
                          ensure_ascii=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_csv_cell(v) for v in row])
        return buf.getvalue()

    def join(self, other: "ResultSet", on: str) -> "ResultSet":
        """Left join on exact equality of the `on` column.

        The right side must expose unique join keys; unmatched left rows
        get None for right-only columns.
        """
        if on not in self.columns:
            raise QueryError(f"join alias {on!r} missing on the left side")
        if on not in other.columns:
            raise QueryError(f"join alias {on!r} missing on the right side")
        right_cols = [c for c in other.columns if c != on]
        right_key = other.columns.index(on)
        right_map: dict = {}
        for row in other.rows:
            key = _hashable(row[right_key])
            if key in right_map:
                raise QueryError(f"duplicate join key {row[right_key]!r} "
                                 "on the right side")
            right_map[key] = tuple(v for i, v in enumerate(row)
                                   if i != right_key)
        left_key = self.columns.index(on)
        rows = []
        for row in self.rows:
            extra = right_map.get(_hashable(row[left_key]),
                                  (None,) * len(right_cols))
            rows.append(tuple(row) + extra)
        return ResultSet(columns=self.columns + tuple(right_cols),
                         rows=tuple(rows))


def _render_value(v):
    if isinstance(v, datetime):
        return format_time(v)
    if isinstance(v, list):
        return [_render_value(x) for x in v]
    return v


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, datetime):
        return format_time(v)
    if isinstance(v, list):
        return ",".join(str(_csv_cell(x)) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, dict):
        return json.dumps(v, ensure_ascii=False, sort_keys=True)
    return v


# ---------------------------------------------------------------------------
# Entry points


def execute(chain: ChainHandle, store: TagStore, query: Query) -> ResultSet:
    """Run a parsed query against a chain and tag store."""
    if query.level == "transaction":
        return _exec_transaction(chain, store, query)
    return _exec_entity_level(chain, store, query)


def run(chain: ChainHandle, store: TagStore, spec: dict) -> ResultSet:
    return execute(chain, store, parse_query(spec))


def balance_sheet(chain: ChainHandle, store: TagStore,
                  service_source: str = "tor") -> ResultSet:
    """Per-provider money-flow summary for one service tag source.

    Columns: name, volume (transactions paying the provider), incoming
    (sum of output values paid to tagged addresses), outgoing (sum of
    input values spent from them), first_tx, last_tx, and num_days
    between them. Providers with no spends report outgoing 0.
    """
    incoming = run(chain, store, {
        "level": "transaction",
        "select": ["output.address.tag.info.provider as @name",
                   "count(self.txes) as volume",
                   "sum(output.value) as incoming",
                   "min(time) as first_tx",
                   "max(time) as last_tx",
                   "date_diff(max(time), min(time)) as num_days"],
        "where": {"output": {"address": {"tag": {
            "type": "service", "source": service_source}}}},
        "group_by": "output.address.tag.info.id",
    })
    outgoing = run(chain, store, {
        "level": "transaction",
        "select": ["input.address.tag.info.provider as @name",
                   "sum(input.value) as outgoing"],
        "where": {"input": {"address": {"tag": {
            "type": "service", "source": service_source}}}},
        "group_by": "input.address.tag.info.id",
    })
    joined = incoming.join(outgoing, on="@name")
    order = ("@name", "volume", "incoming", "outgoing",
             "first_tx", "last_tx", "num_days")
    idx = [joined.columns.index(c) for c in order]
    rows = []
    for row in joined.rows:
        picked = list(row[i] for i in idx)
        if picked[3] is None:
            picked[3] = 0
        rows.append(tuple(picked))
    return ResultSet(columns=("name",) + order[1:], rows=tuple(rows))
