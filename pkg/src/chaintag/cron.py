"""Five-field crontab schedule parsing and next-fire computation."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone


class ScheduleError(ValueError):
    pass


# (name, min, max) per field position
_FIELDS = (
    ("minute", 0, 59),
    ("hour", 0, 23),
    ("day-of-month", 1, 31),
    ("month", 1, 12),
    ("day-of-week", 0, 7),  # 0 and 7 are both Sunday
)


def _parse_field(text: str, name: str, lo: int, hi: int) -> tuple[frozenset[int], bool]:
    """Parse one crontab field into its matching set; returns (set, is_star)."""

    def number(tok: str) -> int:
        try:
            n = int(tok)
        except ValueError:
            raise ScheduleError(f"{name}: not a number: {tok!r}") from None
        if not lo <= n <= hi:
            raise ScheduleError(f"{name}: value {n} out of range {lo}-{hi}")
        return n

    values: set[int] = set()
    is_star = text == "*"
    for item in text.split(","):
        if not item:
            raise ScheduleError(f"{name}: empty list item")
        step = 1
        if "/" in item:
            item, _, step_text = item.partition("/")
            try:
                step = int(step_text)
            except ValueError:
                raise ScheduleError(f"{name}: bad step {step_text!r}") from None
            if step < 1:
                raise ScheduleError(f"{name}: step must be >= 1")
        if item == "*":
            first, last = lo, hi
        elif "-" in item:
            a, _, b = item.partition("-")
            first, last = number(a), number(b)
            if first > last:
                raise ScheduleError(f"{name}: descending range {item!r}")
        else:
            first = last = number(item)
        values.update(range(first, last + 1, step))
    return frozenset(values), is_star


@dataclass(frozen=True)
class Schedule:
    expression: str
    minutes: frozenset[int]
    hours: frozenset[int]
    days: frozenset[int]
    months: frozenset[int]
    weekdays: frozenset[int]
    day_star: bool
    weekday_star: bool

    def _day_matches(self, day: datetime) -> bool:
        # Standard crontab rule: when both day fields are restricted,
        # either one matching is enough.
        dow = (day.weekday() + 1) % 7  # cron Sunday=0, Python Monday=0
        dom_ok = day.day in self.days
        dow_ok = dow in self.weekdays
        if self.day_star and self.weekday_star:
            return True
        if self.day_star:
            return dow_ok
        if self.weekday_star:
            return dom_ok
        return dom_ok or dow_ok

    def next_fire_after(self, ts: datetime) -> datetime:
        """Earliest matching minute strictly after `ts` (UTC)."""
        if ts.tzinfo is None:
            ts = ts.replace(tzinfo=timezone.utc)
        t = ts.astimezone(timezone.utc).replace(second=0, microsecond=0)
        t += timedelta(minutes=1)
        # Bounded scan: any non-empty schedule fires within ~4 years
        # (worst case Feb 29), so this cannot spin forever.
        limit = t + timedelta(days=366 * 4 + 1)
        while t <= limit:
            if t.month not in self.months:
                if t.month == 12:
                    t = t.replace(year=t.year + 1, month=1, day=1,
                                  hour=0, minute=0)
                else:
                    t = t.replace(month=t.month + 1, day=1, hour=0, minute=0)
                continue
            if not self._day_matches(t):
                t = (t + timedelta(days=1)).replace(hour=0, minute=0)
                continue
            if t.hour not in self.hours:
                t = (t + timedelta(hours=1)).replace(minute=0)
                continue
            if t.minute not in self.minutes:
                t += timedelta(minutes=1)
                continue
            return t
        raise ScheduleError(f"schedule {self.expression!r} never fires")


def parse_schedule(expr: str) -> Schedule:
    """Parse `minute hour day-of-month month day-of-week`.

    Supports `*`, numbers, comma lists, `a-b` ranges, and `/n` steps.
    """
    fields = expr.split()
    if len(fields) != 5:
        raise ScheduleError(
            f"expected 5 fields (minute hour dom month dow), got {len(fields)}")
    parsed = [_parse_field(f, name, lo, hi)
              for f, (name, lo, hi) in zip(fields, _FIELDS)]
    weekdays = {d % 7 for d in parsed[4][0]}
    return Schedule(
        expression=expr,
        minutes=parsed[0][0],
        hours=parsed[1][0],
        days=parsed[2][0],
        months=parsed[3][0],
        weekdays=frozenset(weekdays),
        day_star=parsed[2][1],
        weekday_star=parsed[4][1],
    )
