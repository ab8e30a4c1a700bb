#!/usr/bin/env python
# The slate environment served over TCP. A seeded episode played through the
# client matches the same episode played in-process step for step.
import numpy as np

from slaterl import synth
from slaterl.env import EpisodeConfig, SlateEnv
from slaterl.policies_base import UniformPolicy
from slaterl.server import EnvClient, make_env_factory, serve_in_thread

world = synth.generate_world(seed=6, n_items=20, n_chains=2, chain_length=3)
cfg = EpisodeConfig(max_pages=3)
server, (host, port) = serve_in_thread(make_env_factory(world, world.catalog, cfg, world.sample_user))

local = SlateEnv(world, world.catalog, cfg, world.sample_user)
with EnvClient(host, port) as client:
    s = local.reset(seed=7)
    token, remote = client.reset(seed=7)
    rng = np.random.default_rng(0)
    ret = 0.0
    while not s.terminal:
        a, _ = UniformPolicy().sample(s, local.action_mask(), rng)
        lr, rr = local.step(a), client.step(token, a)
        assert lr == rr
        s = lr.next_state
        ret += lr.reward
    print(f"{s.step_index} steps, undiscounted return {ret:.3f}, remote matched")
server.shutdown()
