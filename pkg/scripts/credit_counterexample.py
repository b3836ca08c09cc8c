"""Two mechanisms with identical shared-reward laws but different per-agent credit."""
import json

from filtered_pg.oracle import shared_reward_counterexample

if __name__ == "__main__":
    print(json.dumps(shared_reward_counterexample(), indent=2))
