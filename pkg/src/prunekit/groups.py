"""Pruning groups: channel-coupled (layer, role) sites that must shrink together.

Coupling is found by propagating channel-space identities forward through
the graph: producers (conv/linear outputs) open a fresh space, elementwise
and pooling ops pass the space through, batchnorm attaches to it, residual
adds merge two spaces, and flatten re-expresses a space at S = H*W indices
per channel (members record that expansion factor). The result partitions
every prunable site into exactly one group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import GraphValidationError
from .model import ModelGraph, ParamRole, roles_of


@dataclass(frozen=True)
class GroupMember:
    layer: str
    role: ParamRole
    expand: int = 1  # indices per channel on this member's axis (flatten)


@dataclass
class PruneGroup:
    id: int
    members: tuple[GroupMember, ...]
    width: int
    unprunable: bool = False
    protected_floor: int = 1

    def member_keys(self):
        return {(m.layer, m.role) for m in self.members}

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "unprunable": self.unprunable,
            "protected_floor": self.protected_floor,
            "members": [
                {"layer": m.layer, "role": m.role.value, "expand": m.expand}
                for m in self.members
            ],
        }


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def build_groups(m: ModelGraph) -> list[PruneGroup]:
    """Partition all prunable (layer, role) sites into coupled groups.

    Groups touching the raw input channels or the final logits are marked
    unprunable: removing their indices would change the task I/O.
    """
    shapes = m.output_shapes()
    topo = m.topo_order()
    topo_idx = {nid: i for i, nid in enumerate(topo)}

    uf = _UnionFind()
    # channel space carried on each node's output: (space key, expand, width)
    out_space: dict[str, tuple[str, int]] = {}
    width_of: dict[str, int] = {}
    # space key -> [(topo position, GroupMember)]
    attached: dict[str, list[tuple[int, GroupMember]]] = {}
    unprunable_keys: set[str] = set()

    def attach(key, nid, role, expand=1):
        attached.setdefault(key, []).append(
            (topo_idx[nid], GroupMember(nid, role, expand)))

    for nid in topo:
        node = m.nodes[nid]
        k = node.kind
        ins = m.inputs_of(nid)
        if k == "input":
            key = nid
            uf.add(key)
            width_of[key] = m.input_shape[0]
            out_space[nid] = (key, 1)
            unprunable_keys.add(key)
            continue

        src_key, src_expand = out_space[ins[0]]

        if k in ("conv2d", "linear"):
            in_role = ParamRole.CONV_IN if k == "conv2d" else ParamRole.LINEAR_IN
            out_role = ParamRole.CONV_OUT if k == "conv2d" else ParamRole.LINEAR_OUT
            attach(src_key, nid, in_role, src_expand)
            key = nid
            uf.add(key)
            width_of[key] = node.role_extent(out_role)
            attach(key, nid, out_role)
            out_space[nid] = (key, 1)
        elif k == "batchnorm2d":
            if src_expand != 1:
                raise GraphValidationError(
                    f"node {nid!r}: batchnorm cannot follow an expanded space")
            attach(src_key, nid, ParamRole.NORM_SCALE_SHIFT)
            out_space[nid] = (src_key, src_expand)
        elif k == "flatten":
            _, h, w = shapes[ins[0]]
            out_space[nid] = (src_key, src_expand * h * w)
        elif k == "add":
            other_key, other_expand = out_space[ins[1]]
            if other_expand != src_expand:
                raise GraphValidationError(
                    f"node {nid!r}: add operands carry different expansions")
            uf.union(src_key, other_key)
            out_space[nid] = (src_key, src_expand)
        elif k in ("relu", "maxpool2d", "avgpool2d", "globalavgpool",
                   "softmax_ce_loss"):
            out_space[nid] = (src_key, src_expand)
        elif k == "output":
            unprunable_keys.add(src_key)
            out_space[nid] = (src_key, src_expand)
        else:
            raise GraphValidationError(f"node {nid!r}: no grouping rule for {k!r}")

    # collect union-find components
    roots: dict[str, dict] = {}
    for key in list(uf.parent):
        root = uf.find(key)
        entry = roots.setdefault(root, {"members": [], "widths": set(),
                                        "unprunable": False, "first": 1 << 30})
        entry["widths"].add(width_of[key])
        if key in unprunable_keys:
            entry["unprunable"] = True
        for pos, member in attached.get(key, []):
            entry["members"].append((pos, member))
            entry["first"] = min(entry["first"], pos)

    groups = []
    for root, entry in sorted(roots.items(), key=lambda kv: kv[1]["first"]):
        if not entry["members"]:
            continue  # space never touches a parameter (e.g. input fed to pooling only)
        if len(entry["widths"]) != 1:
            raise GraphValidationError(
                f"coupled layers disagree on width: {sorted(entry['widths'])}")
        width = entry["widths"].pop()
        members = tuple(member for _, member in
                        sorted(entry["members"], key=lambda pm: (pm[0], pm[1].role.value)))
        seen = set()
        for member in members:
            if (member.layer, member.role) in seen:
                raise GraphValidationError(
                    f"duplicate group member {member.layer}/{member.role.value}")
            seen.add((member.layer, member.role))
        groups.append(PruneGroup(
            id=len(groups), members=members, width=width,
            unprunable=entry["unprunable"]))

    _check_partition(m, groups)
    return groups


def _check_partition(m: ModelGraph, groups: list[PruneGroup]) -> None:
    """Every prunable site must land in exactly one group, with sane extents."""
    all_sites = set()
    for node in m.nodes.values():
        for role in roles_of(node.kind):
            all_sites.add((node.id, role))
    grouped = []
    for g in groups:
        for member in g.members:
            grouped.append((member.layer, member.role))
            extent = m.nodes[member.layer].role_extent(member.role)
            if extent != g.width * member.expand:
                raise GraphValidationError(
                    f"group {g.id}: member {member.layer}/{member.role.value} has "
                    f"extent {extent}, expected {g.width}*{member.expand}")
    if len(grouped) != len(set(grouped)) or set(grouped) != all_sites:
        missing = all_sites - set(grouped)
        raise GraphValidationError(
            f"grouping is not a partition of prunable sites (missing: {missing})")


def group_prunable_mask(group: PruneGroup, removed: set[int]) -> dict:
    """Per-member keep lists after removing `removed` channel indices.

    Flatten-annotated members get each kept channel k expanded to the index
    block [k*S, (k+1)*S).
    """
    for idx in removed:
        if not 0 <= idx < group.width:
            raise GraphValidationError(
                f"group {group.id}: removed index {idx} out of range [0, {group.width})")
    keep = [i for i in range(group.width) if i not in removed]
    if len(keep) < max(group.protected_floor, 1):
        raise GraphValidationError(
            f"group {group.id}: keeping {len(keep)} indices violates floor "
            f"{max(group.protected_floor, 1)}")
    masks = {}
    for member in group.members:
        if member.expand == 1:
            masks[(member.layer, member.role)] = list(keep)
        else:
            s = member.expand
            expanded = []
            for k in keep:
                expanded.extend(range(k * s, (k + 1) * s))
            masks[(member.layer, member.role)] = expanded
    return masks


def groups_to_json(groups: list[PruneGroup]) -> str:
    return json.dumps([g.to_json() for g in groups], indent=1)
