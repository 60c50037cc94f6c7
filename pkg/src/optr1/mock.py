"""A plain C stand-in for a GPU application, so the harness runs without GPU hardware.

The generated repository holds ``kernel.c``: a small "kernel" whose region of
interest contains an artificial delay, and a ``main`` that times it and
prints the run protocol.  Removing or shrinking the delay is the
optimization.

With ``synthetic=True`` the delay does no real waiting: it adds to a counter,
and the reported time is ``1 ms + delay``.  Runs are then byte-for-byte
reproducible, which is what record/replay tests need.
"""

from __future__ import annotations

from pathlib import Path

from .problem import OptimizationTask, RegionOfInterest

KERNEL_FILE = "kernel.c"
ROI_BEGIN = "/* roi-begin */"
ROI_END = "/* roi-end */"

_SOURCE = """\
#include <stdio.h>
#include <time.h>
#include <unistd.h>

#define N 256
#define REPS 3

static long delay_units = 0;

static void delay(int ms)
{
#ifdef SYNTHETIC_TIME
    delay_units += ms;
#else
    usleep((useconds_t)ms * 1000u);
#endif
}

static void scale(double *out, const double *in, int n)
{
    /* roi-begin */
    for (int i = 0; i < n; i++)
        out[i] = in[i] * 2.0;
    delay(DELAY_MS);
    /* roi-end */
}

static double now_ms(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return ts.tv_sec * 1e3 + ts.tv_nsec / 1e6;
}

int main(void)
{
    static double in[N], out[N];
    int ok = 1;
    for (int i = 0; i < N; i++)
        in[i] = (double)i;
    for (int r = 0; r < REPS; r++) {
        long before = delay_units;
        double t0 = now_ms();
        scale(out, in, N);
        double t1 = now_ms();
#ifdef SYNTHETIC_TIME
        (void)t0; (void)t1;
        printf("OPTBENCH_TIME_MS: %.6f\\n", 1.0 + (double)(delay_units - before));
#else
        (void)before;
        printf("OPTBENCH_TIME_MS: %.6f\\n", t1 - t0);
#endif
        for (int i = 0; i < N; i++)
            if (out[i] != 2.0 * in[i])
                ok = 0;
    }
    printf("OPTBENCH_CORRECT: %d\\n", ok);
    return 0;
}
"""

_ANALYZE = """\
#!/bin/sh
# Compile verbosely and report resource usage in the same form a GPU compiler does.
cc -O2 -c kernel.c -o /dev/null "$@" || exit 1
echo "info    : Compiling entry function 'scale'"
echo "info    : Used 24 registers, 0 bytes spill stores, 0 bytes spill loads"
"""


def write_mock_repo(dest: str | Path, delay_ms: int = 20, synthetic: bool = True, *,
                    task_id: str = "mock-scale", **task_fields) -> OptimizationTask:
    """Write the mock repository to ``dest`` and return its task (no baseline yet)."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    source = _SOURCE.replace("DELAY_MS", str(int(delay_ms)))
    (dest / KERNEL_FILE).write_text(source)
    (dest / "analyze.sh").write_text(_ANALYZE)
    (dest / "README").write_text("Mock application: scale() doubles an array, slowly.\n")
    lines = source.split("\n")
    begin = lines.index("    " + ROI_BEGIN) + 1
    end = lines.index("    " + ROI_END) + 1
    flags = "-DSYNTHETIC_TIME " if synthetic else ""
    fields = {"analysis_command": "sh analyze.sh", "category": "mock", **task_fields}
    return OptimizationTask(
        task_id=task_id,
        repo_root=dest,
        # the ROI is the body between the marker comments
        roi=RegionOfInterest.from_file(dest, KERNEL_FILE, begin + 1, end - 1),
        build_command=f"cc -O2 {flags}-o kernel kernel.c",
        run_script="./kernel",
        **fields,
    )


# Ready-made replacements for the ROI.
FAST_BODY = "    for (int i = 0; i < n; i++)\n        out[i] = in[i] * 2.0;\n"
BROKEN_BODY = "    for (int i = 0; i < n; i++)\n        out[i] = in[i] * 2.0\n"  # missing semicolon
WRONG_BODY = "    for (int i = 0; i < n; i++)\n        out[i] = in[i] * 3.0;\n"


def delay_body(ms: int) -> str:
    return FAST_BODY + f"    delay({int(ms)});\n"
