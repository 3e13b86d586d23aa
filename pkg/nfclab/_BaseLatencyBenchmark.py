"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of base latency benchmark and run function.

"""

# import modules
import logging

import numpy as np
import pandas as pd

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_random_state
from joblib import Parallel, delayed

from nfclab._bench import run_benchmark
from nfclab._timing import LinkProfile, default_profiles, policy_from_spec

logger = logging.getLogger(__name__)


# %% Class definition

# define BaseLatencyBenchmark class (BaseEstimator allows to call get_params and set_params)
class BaseLatencyBenchmark(BaseEstimator):
    """
    Base class for LatencyBenchmark.
    Warning: This class should not be used directly. Use derived classes
    instead.
    """

    # define init function
    def __init__(self, profiles=None,
                 n_runs=20,
                 policy=None,
                 n_jobs=-1,
                 random_state=None):

        self.profiles = profiles
        self.n_runs = n_runs
        self.policy = policy
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _input_checks(self):
        # check and define the input parameters
        profiles = self.profiles
        n_runs = self.n_runs
        policy = self.policy
        n_jobs = self.n_jobs

        # resolve profile names against the default profiles
        known = default_profiles()
        if profiles is None:
            profiles = list(known.values())
        elif isinstance(profiles, (str, LinkProfile)):
            profiles = [profiles]
        resolved = []
        for profile in profiles:
            if isinstance(profile, LinkProfile):
                resolved.append(profile)
            elif str(profile).upper() in known:
                resolved.append(known[str(profile).upper()])
            else:
                raise ValueError("profiles must be LinkProfile objects or "
                                 "one of %s, got %s"
                                 % (", ".join(known), profile))
        names = [p.name for p in resolved]
        if len(set(names)) != len(names):
            raise ValueError("profile names must be unique, got %s" % names)
        if not resolved:
            raise ValueError("profiles must not be empty")
        self.profiles_ = resolved

        # check the number of runs
        if isinstance(n_runs, bool) or not isinstance(n_runs, int):
            raise ValueError("n_runs must be an integer, got %s" % n_runs)
        if n_runs < 1:
            raise ValueError("n_runs must be at least 1, got %s" % n_runs)

        # timeout policy of the PCD, a spec string or a policy object
        self.policy_ = None if policy is None else policy_from_spec(policy)

        # check the number of parallel jobs
        if n_jobs is not None and (isinstance(n_jobs, bool) or
                                   not isinstance(n_jobs, int) or
                                   n_jobs == 0):
            raise ValueError("n_jobs must be a non-zero integer or None, "
                             "got %s" % n_jobs)

    # %% Run function
    # function to measure every profile
    def run(self):
        """
        Run the benchmark for every profile.

        Parameters
        ----------
        None.

        Returns
        -------
        self : object
            The fitted LatencyBenchmark with `results_` and `samples_`.
        """

        # check the inputs
        self._input_checks()
        # one seed per profile keeps results independent of scheduling
        random_state = check_random_state(self.random_state)
        seeds = random_state.randint(np.iinfo(np.int32).max,
                                     size=len(self.profiles_))
        logger.info("benchmarking %s with %d runs each",
                    ", ".join(p.name for p in self.profiles_), self.n_runs)

        # every profile runs on its own virtual clock
        results = Parallel(n_jobs=self.n_jobs, backend="threading")(
            delayed(run_benchmark)(profile, self.n_runs, int(seed),
                                   self.policy_)
            for profile, seed in zip(self.profiles_, seeds))

        self.samples_ = [s for samples in results for s in samples]
        self.results_ = pd.DataFrame({
            "profile": [s.profile for s in self.samples_],
            "command": [s.command for s in self.samples_],
            "run": [s.run for s in self.samples_],
            "latency_us": [s.latency_us for s in self.samples_],
            "total": [s.total for s in self.samples_],
            "timed_out": [s.timed_out for s in self.samples_]})

        # return the fitted object
        return self

    # sklearn's fitted checks expect a fit method
    def fit(self, X=None, y=None):
        return self.run()
