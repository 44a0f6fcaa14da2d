"""
Runtime and narrative benchmark
Times the closed-form vs simulator sweep and prints the tool's answers beside published outcomes
"""
import os
import sys
import time

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import yaml

from backend.config import Config
from backend.cost_model import CostOptions
from backend.specs import load_config
from backend.tuner import TuneRequest, scale_analysis, tune_micro_batch, tune_parallelism
from backend.utils import setup_logging
from profiles.profile_store import default_profiles, load_profiles
from simulator.schedule_sim import SimInput, closed_form_bubble_ratio, simulate


def benchmark_bubble_sweep():
    """Simulated vs closed-form bubble ratio for p in 1..8, m in 1..32"""
    print("=" * 60)
    print("Bubble Sweep")
    print("=" * 60)

    start = time.time()
    worst = 0.0
    for p in range(1, 9):
        for m in range(1, 33):
            result = simulate(SimInput(p=p, m=m))
            worst = max(worst, abs(result.bubble_ratio - closed_form_bubble_ratio(p, m)))
    elapsed = time.time() - start
    print(f"  256 schedules in {elapsed:.3f}s, max deviation {worst:.3g}")


def narrative_cases():
    """Tuner answers for the illustrative fixtures"""
    with open(os.path.join(Config.FIXTURES_DIR, 'narrative.yaml'), 'r') as f:
        narrative = yaml.safe_load(f)

    base = default_profiles()
    profiles = load_profiles([os.path.join(Config.FIXTURES_DIR, narrative['micro_batch']['profile'])], base=base)
    options = CostOptions.from_config()

    print("\n" + "=" * 60)
    print("Narrative Fixtures (illustrative, not asserted)")
    print("=" * 60)

    for case in narrative['micro_batch']['cases']:
        model, parallel, platform = load_config(os.path.join(Config.CONFIGS_DIR, case['config']))
        report = tune_micro_batch(TuneRequest(model, platform, profiles, parallel=parallel, options=options))
        print(f"  {model.name}: best b={report.best.parallel.micro_batch} "
              f"(published {case['published_best_b']})")

    layout_case = narrative['parallelism']
    model, parallel, platform = load_config(os.path.join(Config.CONFIGS_DIR, layout_case['config']))
    layouts = [tuple(layout) for layout in layout_case['layouts']]
    report = tune_parallelism(TuneRequest(model, platform, profiles, parallel=parallel, layouts=layouts,
                                          options=options))
    times = {(c.parallel.tp, c.parallel.pp, c.parallel.dp): c.t_iter for c in report.ranked}
    if len(times) == 2:
        first, second = layouts
        print(f"  {model.name}: {first} vs {second} speedup {times[second] / times[first]:.3f}x "
              f"(published {layout_case['published_speedup']}x)")

    scale_case = narrative['scale']
    model, parallel, platform = load_config(os.path.join(Config.CONFIGS_DIR, scale_case['config']))
    report = scale_analysis(TuneRequest(model, platform, profiles, parallel=parallel,
                                        dp_range=scale_case['dp_range'], token_budget=scale_case['token_budget'],
                                        rent_rate=scale_case['rent_rate'], gpu_price=scale_case['gpu_price'],
                                        options=options))
    published = scale_case['published_days']
    for point in report.scale:
        if point.feasible:
            note = f" (published {published[point.dp]})" if point.dp in published else ''
            print(f"  {model.name} d={point.dp}: {point.days:.1f} days{note}, "
                  f"scaling {point.scaling_factor:.3f}, rent {point.rent_cost:,.0f}")


if __name__ == '__main__':
    setup_logging('WARNING')
    benchmark_bubble_sweep()
    narrative_cases()
    print("\n" + "=" * 60)
    print("Benchmark completed!")
    print("=" * 60)
