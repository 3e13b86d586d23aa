"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of main user classes.

"""

from nfclab._LatencyEvaluation import LatencyEvaluation


class LatencyBenchmark(LatencyEvaluation):
    """
    Latency benchmark class labeled `LatencyBenchmark()`. Initializes
    parameters for the measurement.

    Parameters
    ----------
    profiles : list of str or LinkProfile, str, LinkProfile or NoneType
        Configurations to measure. Strings name the default profiles:

        - `TAG`: the reader talks to the card directly.
        - `RP`: local replay of a recorded run, no server involved.
        - `BT`: relay over a Bluetooth PAN, server on one of the devices.
        - `BW`: Bluetooth tethering to a wireless network, server wired.
        - `WH`: both devices in a wireless hotspot.
        - `WA`: both devices in a wireless network with access point.

        Relay profiles carry a delay distribution per network hop, see
        `LinkProfile`. If None, all default profiles are measured. The
        default is None.
    n_runs : int
        Number of times the command sequence is measured per profile.
        The default is 20.
    policy : str, FwtRetransmit, MandatoryTimeout or NoneType
        Timeout policy of the reader, either an object or a string like
        `fwt:8x3` (FWT_8 windows, 3 attempts) or `timeout:1.8s`. Late
        answers are recorded as timed out samples. If None, the reader
        waits for every answer. The default is None.
    n_jobs : int or None
        The number of parallel jobs, one profile per job. Follows
        [`joblib`](https://joblib.readthedocs.io){:target="_blank"} semantics:

        - `n_jobs=-1` means all available cpu cores.
        - `n_jobs=None` and `n_jobs=1` means no parallelism.

        The default is -1.
    random_state : int, None or numpy.random.RandomState object
        Random seed used to draw the link delays. Every profile gets its own
        seed derived from it, so results do not depend on `n_jobs`. The
        default is None.

    Returns
    -------
    None. Initializes parameters for LatencyBenchmark.


    Notes
    -----
    `LatencyBenchmark()` measures a common command sequence for reading a
    value from a DESFire card: ISO SELECT of the DESFire AID (`0xA4`), Select
    Application (`0x5A`), Get FileSettings (`0xF5`) and Get Value (`0x6C`).
    Every sample is the total latency of one command, i.e. the card's
    processing time plus the delays of the four network hops a relayed
    command crosses (reader to server to tag-role device and back). All
    time is simulated, so the results are reproducible for a fixed
    `random_state`.

    After [`.run()`](#nfclab.LatencyBenchmark.run) the results can be
    inspected with [`.summary()`](#nfclab.LatencyBenchmark.summary),
    [`.box_stats()`](#nfclab.LatencyBenchmark.box_stats),
    [`.classify()`](#nfclab.LatencyBenchmark.classify) and
    [`.plot()`](#nfclab.LatencyBenchmark.plot), and written out with
    `.to_csv()`, `.to_json()` and `.gnuplot_script()`.

    The classification reports, per command, the smallest frame waiting time
    FWT_i with 8 <= i <= 11 that covers the largest latency within 1.5
    interquartile ranges of the upper quartile. FWT_8 is the minimum the
    original card specifies; anything beyond FWT_11 is marked `exceeds`.

    Examples
    --------
    ```py
    # load the benchmark
    from nfclab import LatencyBenchmark

    # measure local replay against two relays
    bench = LatencyBenchmark(profiles=["RP", "BT", "WA"], n_runs=20,
                             random_state=123)
    bench.run()
    bench.summary()
    bench.classify()
    ```
    """

    # define init function
    def __init__(self, profiles=None,
                 n_runs=20,
                 policy=None,
                 n_jobs=-1,
                 random_state=None):
        # access inherited methods
        super().__init__(
            profiles=profiles,
            n_runs=n_runs,
            policy=policy,
            n_jobs=n_jobs,
            random_state=random_state
        )

    def run(self):
        """
        LatencyBenchmark measurement.

        Parameters
        ----------
        None.

        Returns
        -------
        self : object
            The benchmark with the samples in `results_`, a DataFrame with
            columns profile, command, run, latency_us, total and timed_out.

        Examples
        --------
        ```py
        from nfclab import LatencyBenchmark

        bench = LatencyBenchmark(profiles="BT", n_runs=5, random_state=1)
        bench.run().results_.head()
        ```
        """
        return super().run()

    def summary(self):
        """
        Print the benchmark setup, the box plot statistics per profile and
        command in milliseconds and the FWT classification.

        Parameters
        ----------
        None.

        Returns
        -------
        None. Prints the summary tables.
        """
        return super().summary()

    def box_stats(self):
        """
        Box plot statistics per profile and command.

        Returns
        -------
        stats : pd.DataFrame
            Indexed by profile and command, with median, q1, q3,
            whisker_low and whisker_high in milliseconds, the number of
            outliers and the number of timed out samples.
        """
        return super().box_stats()

    def classify(self):
        """
        Smallest covering FWT per profile and command.

        Returns
        -------
        classes : pd.DataFrame
            Entries `FWT_8` to `FWT_11`, or `exceeds`.
        """
        return super().classify()

    def plot(self):
        """
        Plot the latencies as box plots with the FWT_8 to FWT_11 windows
        as dashed lines.

        Parameters
        ----------
        None.

        Returns
        -------
        fig : plotnine.ggplot
        """
        return super().plot()
