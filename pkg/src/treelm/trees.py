"""Phrase-structure trees, bracketed-text parsing, and action linearisation."""

from __future__ import annotations

from dataclasses import dataclass, field

NT = "NT"
GEN = "GEN"
REDUCE = "REDUCE"


class TreeParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass
class Tree:
    """Nonterminal node (children nonempty) or terminal leaf (no children)."""

    label: str
    children: list = field(default_factory=list)

    @property
    def is_leaf(self):
        return not self.children

    def leaves(self):
        if self.is_leaf:
            return [self.label]
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return self.label == other.label and self.children == other.children

    def __repr__(self):
        return f"Tree({print_bracketed(self)!r})"


@dataclass(frozen=True)
class Action:
    """One derivation step: NT(label), GEN(word), or REDUCE."""

    kind: str
    payload: str = None

    def __post_init__(self):
        if self.kind in (NT, GEN) and self.payload is None:
            raise ValueError(f"{self.kind} needs a payload")
        if self.kind == REDUCE and self.payload is not None:
            raise ValueError("REDUCE takes no payload")

    def __str__(self):
        if self.kind == REDUCE:
            return "REDUCE"
        return f"{self.kind}({self.payload})"

    @staticmethod
    def parse(text):
        text = text.strip()
        if text == "REDUCE":
            return Action(REDUCE)
        for kind in (NT, GEN):
            if text.startswith(kind + "(") and text.endswith(")"):
                return Action(kind, text[len(kind) + 1:-1])
        raise ValueError(f"cannot parse action {text!r}")


def parse_bracketed(text):
    """Parse one balanced bracketed expression like ``(S (NP the hawk))``."""
    pos = 0
    n = len(text)

    def skip_space(p):
        while p < n and text[p].isspace():
            p += 1
        return p

    def read_token(p):
        start = p
        while p < n and not text[p].isspace() and text[p] not in "()":
            p += 1
        if p == start:
            raise TreeParseError("expected token", start)
        return text[start:p], p

    def read_node(p):
        p = skip_space(p)
        if p >= n or text[p] != "(":
            raise TreeParseError("expected '('", p)
        p = skip_space(p + 1)
        label, p = read_token(p)
        children = []
        while True:
            p = skip_space(p)
            if p >= n:
                raise TreeParseError("unbalanced brackets", p)
            if text[p] == ")":
                if not children:
                    raise TreeParseError("empty constituent", p)
                return Tree(label, children), p + 1
            if text[p] == "(":
                child, p = read_node(p)
                children.append(child)
            else:
                word, p = read_token(p)
                children.append(Tree(word))

    tree, pos = read_node(skip_space(pos))
    pos = skip_space(pos)
    if pos != n:
        raise TreeParseError("trailing content", pos)
    return tree


def print_bracketed(tree):
    if tree.is_leaf:
        return tree.label
    inner = " ".join(print_bracketed(c) for c in tree.children)
    return f"({tree.label} {inner})"


def linearize(tree):
    """Top-down, left-to-right derivation: NT at entry, GEN at leaves, REDUCE at exit."""
    if tree.is_leaf:
        raise ValueError("root must be a nonterminal")
    actions = []

    def walk(node):
        if node.is_leaf:
            actions.append(Action(GEN, node.label))
            return
        actions.append(Action(NT, node.label))
        for child in node.children:
            walk(child)
        actions.append(Action(REDUCE))

    walk(tree)
    return actions


def delinearize(actions):
    """Inverse of linearize: rebuild the tree with a stack machine."""
    stack = []
    result = None
    for i, action in enumerate(actions):
        if result is not None:
            raise ValueError(f"action {i}: derivation already complete")
        if action.kind == NT:
            stack.append(Tree(action.payload))
        elif action.kind == GEN:
            if not stack:
                raise ValueError(f"action {i}: GEN with no open constituent")
            stack[-1].children.append(Tree(action.payload))
        elif action.kind == REDUCE:
            if not stack:
                raise ValueError(f"action {i}: REDUCE with no open constituent")
            done = stack.pop()
            if not done.children:
                raise ValueError(f"action {i}: REDUCE of empty constituent")
            if stack:
                stack[-1].children.append(done)
            else:
                result = done
    if result is None:
        raise ValueError("incomplete derivation")
    return result


def attach_eos(tree, eos):
    """Copy of ``tree`` with the end-of-sentence terminal appended under the root."""
    return Tree(tree.label, list(tree.children) + [Tree(eos)])


def map_leaves(tree, fn):
    if tree.is_leaf:
        return Tree(fn(tree.label))
    return Tree(tree.label, [map_leaves(c, fn) for c in tree.children])
