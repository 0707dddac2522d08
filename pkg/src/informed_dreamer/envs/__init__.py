"""Informed environments and the name registry."""

import re

from informed_dreamer.diffcore import ContractError
from informed_dreamer.envs.base import EnvDescriptor, InformedEnv, InformedStep
from informed_dreamer.envs.flicker import Flicker
from informed_dreamer.envs.hike import MountainHike, altitude
from informed_dreamer.envs.tabular import (
    TabularEnv,
    TabularInformedPomdp,
    generate_tabular,
)
from informed_dreamer.envs.tiger import tiger, tiger_pomdp
from informed_dreamer.envs.tmaze import TMaze

_HIKE = {"pos-fixed": (False, False), "pos-var": (False, True), "alt-fixed": (True, False), "alt-var": (True, True)}


def make(name: str) -> InformedEnv:
    """Build an environment from its registry name.

    Names: ``tiger``, ``tmaze-<L>``, ``hike/<obs>-<init>`` and ``hikec/...``
    (continuous actions) with ``<obs>`` in {pos, alt} and ``<init>`` in
    {fixed, var}, ``tabular:<S>-<A>-<I>-<O>:<seed>``, and
    ``flicker(p=<p>):<name>`` wrapping any of these.
    """
    name = name.strip()
    m = re.fullmatch(r"flicker\(p=([0-9.eE+-]+)\):(.+)", name)
    if m:
        return Flicker(make(m.group(2)), float(m.group(1)))
    if name == "tiger":
        return tiger()
    m = re.fullmatch(r"tmaze-(\d+)", name)
    if m:
        return TMaze(int(m.group(1)))
    m = re.fullmatch(r"(hikec?)/(pos|alt)-(fixed|var)", name)
    if m:
        alt, var = _HIKE[f"{m.group(2)}-{m.group(3)}"]
        return MountainHike(altitude_obs=alt, varying=var, continuous=m.group(1) == "hikec")
    m = re.fullmatch(r"tabular:(\d+)-(\d+)-(\d+)-(\d+):(\d+)", name)
    if m:
        S, A, I, O, seed = map(int, m.groups())
        return TabularEnv(generate_tabular(S, A, I, O, seed), max_steps=50)
    raise ContractError(f"unknown environment {name!r}")


__all__ = [
    "EnvDescriptor",
    "Flicker",
    "InformedEnv",
    "InformedStep",
    "MountainHike",
    "TMaze",
    "TabularEnv",
    "TabularInformedPomdp",
    "altitude",
    "generate_tabular",
    "make",
    "tiger",
    "tiger_pomdp",
]
