"""Pre-specified simplification of discontinuation-pattern covariates.

The retrieved-dropout models carry time-dependent covariates for the
discontinuation status/pattern.  When a pattern has nobody observed all
the way to the final visit, its final-visit cell mean is inestimable and
the sequential imputation models lose a class level, so patterns are
merged with their neighbours (preferring the earlier one) until every
level is estimable in both arms.  The merge is a deterministic function of
five per-pattern issue indicators, descending from the full 6-level coding
to a single level in the worst case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dgm import J, TrialDataset

ON_TREATMENT_LEVEL = 6


class CollapseError(ValueError):
    """Inconsistent issue report or unusable coding."""


@dataclass(frozen=True)
class PatternIssueReport:
    """Issue indicators; True flags a problem.

    ``pattern_issue[c-1]``: no patient with first affected visit c is
    observed at every visit c..5, in at least one arm (patterns with no
    patients at all count as issues, which merges the unused level away).
    ``data_issue[j-1]``: no post-IE outcome is observed at visit j anywhere.
    ``estimation_issue[j-1]``: some arm has post-IE patients at visit j but
    none of its post-IE outcomes at that visit is observed, so no
    discontinuation term is estimable there and those patient-visits are
    recoded to the on-treatment level.
    """

    pattern_issue: tuple[bool, ...]
    data_issue: tuple[bool, ...]
    estimation_issue: tuple[bool, ...]


@dataclass(frozen=True)
class PatternCoding:
    """Visit-by-pattern covariate levels after collapsing.

    ``groups`` lists the merged post-IE pattern groups in time order; the
    on-treatment level 6 always stands alone except in the terminal
    one-level collapse where ``groups`` is empty.  A group's model code is
    its smallest member.  ``estimation_override[j-1]`` forces the
    on-treatment code at visit j.
    """

    groups: tuple[tuple[int, ...], ...]
    estimation_override: tuple[bool, ...]
    target: str  # "status" | "pattern"

    @property
    def n_levels(self) -> int:
        return len(self.groups) + 1 if self.groups else 1

    @property
    def label(self) -> str:
        if not self.groups:
            return "123456"
        parts = ["".join(str(p) for p in g) for g in self.groups]
        return ", ".join(parts + ["6"])

    def level_of_pattern(self, pattern: int) -> int:
        """Model code of a true pattern (1..5; 6 = never discontinued)."""
        if pattern == ON_TREATMENT_LEVEL:
            return ON_TREATMENT_LEVEL
        for g in self.groups:
            if pattern in g:
                return min(g)
        return ON_TREATMENT_LEVEL  # terminal collapse

    def level_at(self, pattern: np.ndarray, visit: int) -> np.ndarray:
        """Covariate level at a visit for patients with the given patterns.

        Patients are coded on-treatment before their first affected visit
        and wherever the estimation override applies.
        """
        pattern = np.asarray(pattern)
        out = np.full(pattern.shape, ON_TREATMENT_LEVEL, dtype=np.int64)
        if self.estimation_override[visit - 1]:
            return out
        post = (pattern != ON_TREATMENT_LEVEL) & (pattern <= visit)
        if np.any(post):
            lut = np.array([self.level_of_pattern(p) for p in range(1, 7)])
            out[post] = lut[pattern[post] - 1]
        return out

    def level_matrix(self, pattern: np.ndarray) -> np.ndarray:
        """(n, 5) covariate levels across the post-baseline visits."""
        return np.column_stack([self.level_at(pattern, j) for j in range(1, J + 1)])


def detect_issues(dataset: TrialDataset) -> PatternIssueReport:
    """Scan one trial for patterns that would break the RD model fits."""
    pattern = dataset.ie_pattern()
    observed = ~dataset.miss  # (n, 5), visits 1..5
    status = dataset.ie_status()

    pattern_issue = []
    for c in range(1, J + 1):
        issue = False
        for arm in (0, 1):
            members = (dataset.arm == arm) & (pattern == c)
            # a provider must be observed at every visit c..5
            complete = members & observed[:, c - 1 :].all(axis=1)
            if not complete.any():
                issue = True
        pattern_issue.append(issue)

    data_issue, estimation_issue = [], []
    for j in range(1, J + 1):
        post = status[:, j - 1]
        obs_post = post & observed[:, j - 1]
        data_issue.append(bool(post.any()) and not bool(obs_post.any()))
        est = False
        for arm in (0, 1):
            in_arm = dataset.arm == arm
            if (post & in_arm).any() and not (obs_post & in_arm).any():
                est = True
        estimation_issue.append(est)

    return PatternIssueReport(tuple(pattern_issue), tuple(data_issue), tuple(estimation_issue))


def merge_groups(pattern_issue: tuple[bool, ...]) -> tuple[tuple[int, ...], ...]:
    """Merge issue patterns into neighbours, preferring the earlier one.

    Intact patterns anchor groups; an issue pattern joins the group of the
    nearest earlier anchor, and the leading run of issue patterns (which
    has no earlier anchor) joins the first anchor after it.  All-issue
    input yields no groups (terminal collapse into the on-treatment level).
    """
    anchors = [c for c in range(1, J + 1) if not pattern_issue[c - 1]]
    if not anchors:
        return ()
    groups: list[list[int]] = []
    pending: list[int] = []
    for c in range(1, J + 1):
        if not pattern_issue[c - 1]:
            groups.append(pending + [c])
            pending = []
        elif groups:
            groups[-1].append(c)
        else:
            pending.append(c)
    if pending:  # trailing issues with no later anchor join the last group
        groups[-1].extend(pending)
    return tuple(tuple(g) for g in groups)


def plan_collapse(report: PatternIssueReport, target: str) -> PatternCoding:
    """Coding for the requested model family given an issue report.

    The status target keeps a single post-IE level until the terminal
    collapse; the pattern target merges per ``merge_groups``.
    """
    if target not in ("status", "pattern"):
        raise CollapseError(f"unknown collapse target {target!r}")
    for j in range(1, J + 1):
        if report.estimation_issue[j - 1] and not all(report.pattern_issue[:j]):
            raise CollapseError(
                f"inconsistent report: estimation issue at visit {j} "
                "with an intact pattern at or before it"
            )
    groups = merge_groups(report.pattern_issue)
    if target == "status" and groups:
        groups = (tuple(range(1, J + 1)),)
    return PatternCoding(
        groups=groups,
        estimation_override=report.estimation_issue,
        target=target,
    )


def recode(dataset: TrialDataset, coding: PatternCoding) -> np.ndarray:
    """(n, 5) model covariate levels for the dataset under a coding."""
    return coding.level_matrix(dataset.ie_pattern())


def plan_for(dataset: TrialDataset, target: str) -> PatternCoding:
    return plan_collapse(detect_issues(dataset), target)
