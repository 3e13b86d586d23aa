"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of post-run methods.

"""

# import modules
import json

import numpy as np
import pandas as pd

from nfclab._BaseLatencyBenchmark import BaseLatencyBenchmark
from nfclab._bench import (COMMAND_NAMES, FWT_REPORT_MAX, FWT_REPORT_MIN,
                           box_stats, classify_fwt, sequence_totals)
from nfclab._core import fwt_seconds
from sklearn.utils.validation import check_is_fitted
from plotnine import (ggplot, aes, geom_boxplot, geom_hline, annotate,
                      ggtitle, xlab, ylab, theme_bw, theme, element_rect)


CSV_COLUMNS = ["profile", "command", "run", "latency_us"]


class LatencyEvaluation(BaseLatencyBenchmark):
    """
    Base class for latency benchmarks with evaluation methods.
    Warning: This class should not be used directly. Use derived classes
    instead.
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

    def _groups(self):
        # samples per (profile, command) in profile order, then command order
        check_is_fitted(self, attributes=["results_"])
        for profile in self.profiles_:
            for command in COMMAND_NAMES:
                group = [s for s in self.samples_ if s.profile ==
                         profile.name and s.command == command]
                if group:
                    yield profile.name, command, group

    # %% Statistics

    def box_stats(self):
        """
        Box plot statistics per profile and command.

        Parameters
        ----------
        None.

        Returns
        -------
        stats : pd.DataFrame
            Median, quartiles and whiskers in milliseconds, with the number
            of outliers and timeouts.
        """
        rows = []
        for profile, command, group in self._groups():
            answered = [s.total for s in group if not s.timed_out]
            row = {"profile": profile, "command": command,
                   "timeouts": len(group) - len(answered)}
            if len(answered) >= 4:
                stats = box_stats(answered)
                row.update({"median": stats.median * 1e3,
                            "q1": stats.q1 * 1e3, "q3": stats.q3 * 1e3,
                            "whisker_low": stats.whisker_low * 1e3,
                            "whisker_high": stats.whisker_high * 1e3,
                            "outliers": len(stats.outliers)})
            rows.append(row)
        return pd.DataFrame(rows).set_index(["profile", "command"])

    def classify(self):
        """
        FWT class per profile and command.

        Returns
        -------
        classes : pd.DataFrame
            Profiles as rows, commands as columns, entries like `FWT_8` or
            `exceeds`.
        """
        check_is_fitted(self, attributes=["results_"])
        table = {}
        for profile in self.profiles_:
            samples = [s for s in self.samples_ if s.profile == profile.name]
            table[profile.name] = {command: str(cls) for command, cls in
                                   classify_fwt(samples).items()}
        return pd.DataFrame.from_dict(table, orient="index")[
            list(COMMAND_NAMES)]

    def sequence_totals(self):
        """Latency of the whole command sequence per profile and run."""
        check_is_fitted(self, attributes=["results_"])
        totals = sequence_totals(self.samples_)
        frame = pd.Series(totals).rename("total").reset_index()
        frame.columns = ["profile", "run", "total"]
        frame["latency_us"] = np.round(frame["total"] * 1e6).astype(int)
        return frame

    # %% Output

    def summary(self):
        """
        Print the benchmark setup, box plot statistics and FWT classes.

        Parameters
        ----------
        None.

        Returns
        -------
        None.
        """
        check_is_fitted(self, attributes=["results_"])
        print('-' * 60, 'Summary of the LatencyBenchmark', '-' * 60,
              sep='\n')
        print('%-18s%-15s' % ('type:', 'LatencyBenchmark'))
        print('%-18s%-15s' % ('profiles:', ', '.join(
            p.name for p in self.profiles_)))
        print('%-18s%-15s' % ('n_runs:', self.n_runs))
        print('%-18s%-15s' % ('policy:', self.policy_ or 'none'))
        print('%-18s%-15s' % ('samples:', len(self.samples_)))
        print('%-18s%-15s' % ('timeouts:', int(
            self.results_['timed_out'].sum())))
        for profile in self.profiles_:
            print('%-18s%-15s' % (profile.name + ':', profile.describe()))
        print('-' * 60, 'Latency in ms', '-' * 60, sep='\n')
        print(self.box_stats().round(3))
        print('-' * 60, 'Smallest covering FWT', '-' * 60, sep='\n')
        print(self.classify())
        print('-' * 60)

    def to_csv(self, path=None):
        """
        Write the samples as CSV with columns profile, command, run and
        latency_us. Returns the CSV text if `path` is None.
        """
        check_is_fitted(self, attributes=["results_"])
        return self.results_[CSV_COLUMNS].to_csv(path, index=False)

    def to_json(self, path=None):
        """One record per profile and command with stats and FWT class."""
        check_is_fitted(self, attributes=["results_"])
        classes = self.classify()
        stats = self.box_stats()
        records = []
        for (profile, command), row in stats.iterrows():
            records.append({
                "profile": profile, "command": command,
                "stats": {k: (None if pd.isna(v) else float(v))
                          for k, v in row.items()},
                "fwt_class": classes.loc[profile, command]})
        text = json.dumps(records, indent=2)
        if path is None:
            return text
        with open(path, "w") as f:
            f.write(text + "\n")
        return None

    def gnuplot_script(self, csv_path="latency.csv"):
        """
        Gnuplot script drawing the CSV written by `to_csv` as one box per
        profile and command, with dashed FWT_8 to FWT_11 lines.
        """
        check_is_fitted(self, attributes=["results_"])
        lines = ['set datafile separator ","',
                 'set style data boxplot',
                 'set style boxplot outliers pointtype 7',
                 'set ylabel "latency [ms]"',
                 'set key off',
                 'set logscale y']
        for i in range(FWT_REPORT_MIN, FWT_REPORT_MAX + 1):
            ms = fwt_seconds(i) * 1e3
            lines.append('set arrow from graph 0, first %.4f to graph 1, '
                         'first %.4f nohead dashtype 2' % (ms, ms))
            lines.append('set label "FWT_%d" at graph 1.01, first %.4f'
                         % (i, ms))
        plots = []
        labels = []
        position = 1
        for profile in self.profiles_:
            for command in COMMAND_NAMES:
                # rows of other boxes become undefined (1/0) and are skipped
                plots.append(
                    "'%s' every ::1 using (%d):((strcol(1) eq '%s' && "
                    "strcol(2) eq '%s') ? $4/1000.0 : 1/0)"
                    % (csv_path, position, profile.name, command))
                labels.append('"%s %s" %d' % (profile.name, command,
                                              position))
                position += 1
        lines.append('set xtics (%s) rotate by 45 right' % ", ".join(labels))
        lines.append('plot ' + ", \\\n     ".join(plots))
        return "\n".join(lines) + "\n"

    def plot(self):
        """
        Plot the latency per profile and command as box plots.

        Parameters
        ----------
        None.

        Returns
        -------
        fig : ggplot
            Box plots with dashed lines at FWT_8 to FWT_11.
        """
        check_is_fitted(self, attributes=["results_"])
        df_plot = self.results_.loc[~self.results_['timed_out']].copy()
        df_plot['Latency'] = df_plot['total'] * 1e3
        df_plot['Profile'] = pd.Categorical(
            df_plot['profile'], categories=[p.name for p in self.profiles_])
        df_plot['Command'] = pd.Categorical(df_plot['command'],
                                            categories=list(COMMAND_NAMES))
        fwt = pd.DataFrame({
            'FWT': ['FWT_%d' % i for i in range(FWT_REPORT_MIN,
                                                 FWT_REPORT_MAX + 1)],
            'Latency': [fwt_seconds(i) * 1e3 for i in range(
                FWT_REPORT_MIN, FWT_REPORT_MAX + 1)]})

        fig = (ggplot(df_plot, aes(x='Profile', y='Latency', fill='Command'))
               + geom_boxplot()
               + geom_hline(fwt, aes(yintercept='Latency'),
                            linetype="dashed")
               + annotate('text', x=0.6, y=fwt['Latency'] * 1.1,
                          label=fwt['FWT'], size=7)
               + xlab("Configuration")
               + ylab("Latency [ms]")
               + theme_bw()
               + theme(strip_background=element_rect(fill="#EBEBEB"))
               + theme(legend_direction="horizontal",
                       legend_position="bottom")
               + ggtitle("Command Response Latency")
               )

        # empty return
        return fig
