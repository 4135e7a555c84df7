"""How the batch sampler tightens and relaxes over a run, without any training.

Replays a made-up sequence of monitor values through the schedule updates and shows
which pairs of one sampled batch survive the gap and consistency filters. A count of
one usually means nothing qualified and the sampler fell back to its single easiest pair.
"""

from dataclasses import replace

import numpy as np

from t23dqa.curriculum import (consistency_threshold, initial_state, sample_batch, update_prompt_count,
                               update_score_threshold)

rng = np.random.default_rng(0)
prompt_ids = [f"p{p}" for p in range(8) for _ in range(5)]
mos = np.clip(rng.normal(3, 1, (len(prompt_ids), 12)), 1, 5).round(2)

horizon = 9
state = initial_state(horizon)
srcc_seq = [0.40, 0.55, 0.553, 0.62, 0.625, 0.70, 0.71, 0.712, 0.75, 0.751]
krcc_seq = [0.30, 0.42, 0.50, 0.503, 0.58, 0.585, None, 0.66, 0.70, 0.701]

for t, (s, k) in enumerate(zip(srcc_seq, krcc_seq)):
    state = replace(state, epoch=t, rho=consistency_threshold(t, horizon))
    batch = sample_batch(prompt_ids, mos, state, 5, rng, gap_column=11)
    print(f"epoch {t}: n_p={state.n_p} eta={state.eta:.1f} rho={state.rho:.2f} "
          f"prompts={sorted(set(batch.prompt_ids))} pairs kept={len(batch.eligible_pairs)}/10")
    state = update_score_threshold(update_prompt_count(state, s, 5), k)
