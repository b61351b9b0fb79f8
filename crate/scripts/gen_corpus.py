#!/usr/bin/env python3
"""Regenerate the bundled loop corpus under corpus/.

Each kernel becomes a standalone C program: global arrays filled by a
deterministic LCG, the marked loop region repeated REPS times under a
monotonic clock, then `time` and `checksum` lines on stdout.
"""

import os
import sys

HEADER = """#include <stdio.h>
#include <stdint.h>
#include <time.h>

typedef int I32;
"""

HELPERS = """
static uint32_t lcg_state = {seed}u;

static uint32_t lcg(void)
{{
    lcg_state = lcg_state * 1664525u + 1013904223u;
    return lcg_state >> 8;
}}

static double lcg_unit(void)
{{
    return (double)(lcg() % 10000u) / 10000.0;
}}

static uint64_t fnv(const void *data, size_t len, uint64_t h)
{{
    const unsigned char *p = (const unsigned char *)data;
    for (size_t q = 0; q < len; q++) {{
        h ^= p[q];
        h *= 1099511628211ULL;
    }}
    return h;
}}
"""

MAIN = """
int main(void)
{{
    int i, j, k, Class, rep;
    struct timespec t0, t1;
{init}
    clock_gettime(CLOCK_MONOTONIC, &t0);
    for (rep = 0; rep < {reps}; rep++) {{
#pragma looplearner begin
{region}
#pragma looplearner end
        __asm__ volatile("" ::: "memory");
    }}
    clock_gettime(CLOCK_MONOTONIC, &t1);
    printf("time %.9f\\n", (double)(t1.tv_sec - t0.tv_sec) + (double)(t1.tv_nsec - t0.tv_nsec) * 1e-9);
    uint64_t h = 1469598103934665603ULL;
{hash}
    printf("checksum %016llx\\n", (unsigned long long)h);
    return 0;
}}
"""


def arr(name, ctype, dims):
    return (name, ctype, dims)


def init_code(arrays):
    lines = []
    for name, ctype, dims in arrays:
        total = 1
        for d in dims:
            total *= d
        flat = f"((({ctype} *){name}))" if len(dims) > 1 else name
        if ctype == "double":
            val = "lcg_unit()"
        else:
            val = "(" + ctype + ")(lcg() % 64u)"
        if dims:
            lines.append(f"    for (size_t q = 0; q < {total}; q++) {flat}[q] = {val};")
        else:
            lines.append(f"    {name} = {val};")
    return "\n".join(lines)


def decl_code(arrays, scalars):
    lines = []
    for name, ctype, dims in arrays:
        suffix = "".join(f"[{d}]" for d in dims)
        lines.append(f"static {ctype} {name}{suffix};")
    for s in scalars:
        # Bounds keep external linkage so the compiler cannot treat them as constants.
        lines.append(s + ";" if s.startswith("int ") else f"static {s};")
    return "\n".join(lines)


def hash_code(arrays, hashed_scalars):
    lines = [f"    h = fnv({'&' if not dims else ''}{name}, sizeof {name}, h);" for name, _, dims in arrays]
    lines += [f"    h = fnv(&{s}, sizeof {s}, h);" for s in hashed_scalars]
    return "\n".join(lines)


N1 = 4096
N2 = 128
N3 = 48

KERNELS = []


def kernel(name, arrays, region, reps, scalars=(), hashed=(), seed=12345):
    KERNELS.append(dict(name=name, arrays=arrays, region=region, reps=reps, scalars=scalars, hashed=hashed, seed=seed))


D = "double"
U = "unsigned"

# Depth one.
kernel(
    "regclass",
    [arr("opnd", "I32", [40]), arr("Perl_fold", "I32", [256])],
    """        for (Class = 0; Class < 256; ++Class) {
            if (opnd[1 + (Class >> 3 & 31)] & 1 << (Class & 7)) {
                I32 cf = Perl_fold[Class];
                opnd[1 + (cf >> 3 & 31)] |= 1 << (cf & 7);
            }
        }""",
    400,
)
kernel("vadd", [arr("a", D, [N1]), arr("b", D, [N1]), arr("c", D, [N1])],
       "        for (i = 0; i < 4096; i++)\n            c[i] = a[i] + b[i];", 60)
kernel("saxpy", [arr("x", D, [N1]), arr("y", D, [N1])],
       "        for (i = 0; i < 4096; i++)\n            y[i] = alpha * x[i] + y[i];", 60,
       scalars=["double alpha = 0.5"])
kernel("dot", [arr("a", D, [N1]), arr("b", D, [N1])],
       "        for (i = 0; i < 4096; i++)\n            s += a[i] * b[i];", 60,
       scalars=["double s"], hashed=["s"])
kernel("prefix", [arr("a", D, [N1]), arr("b", D, [N1])],
       "        for (i = 1; i < 4096; i++)\n            a[i] = a[i - 1] * 0.5 + b[i];", 60)
kernel("stencil3", [arr("a", D, [N1]), arr("b", D, [N1])],
       "        for (i = 1; i < 4095; i++)\n            b[i] = (a[i - 1] + a[i] + a[i + 1]) / 3.0;", 60)
kernel("scale_pair", [arr("a", D, [N1]), arr("b", D, [N1]), arr("c", D, [N1]), arr("d", D, [N1])],
       "        for (i = 0; i < 4096; i++) {\n            a[i] = b[i] * 2.0;\n            c[i] = d[i] + 1.0;\n        }", 60)
kernel("triad_split", [arr("a", D, [N1]), arr("b", D, [N1]), arr("c", D, [N1]), arr("d", D, [N1]), arr("e", D, [N1])],
       "        for (i = 0; i < 4096; i++) {\n            a[i] = b[i] + c[i];\n            d[i] = a[i] * 0.5;\n            e[i] = e[i] * 0.99 + 1.0;\n        }", 50)
kernel("running_max", [arr("a", D, [N1])],
       "        for (i = 0; i < 4096; i++) {\n            if (a[i] > m)\n                m = a[i];\n        }", 60,
       scalars=["double m"], hashed=["m"])
kernel("clamp", [arr("a", D, [N1]), arr("b", D, [N1])],
       "        for (i = 0; i < 4096; i++) {\n            b[i] = a[i] * 1.5;\n            if (b[i] > 1.0)\n                b[i] = 1.0;\n        }", 60)
kernel("histogram", [arr("key", U, [N1]), arr("hist", U, [16])],
       "        for (i = 0; i < 4096; i++)\n            hist[key[i] & 15] += 1;", 60)
kernel("reverse", [arr("a", D, [N1]), arr("b", D, [N1])],
       "        for (i = 0; i < 4096; i++)\n            b[i] = a[4095 - i];", 60)
kernel("stride2", [arr("a", D, [N1]), arr("b", D, [N1])],
       "        for (i = 0; i < 4096; i += 2)\n            a[i] = b[i] + b[i + 1];", 80)
kernel("poly", [arr("x", D, [N1]), arr("y", D, [N1])],
       "        for (i = 0; i < 4096; i++)\n            y[i] = ((3.0 * x[i] + 2.0) * x[i] + 1.0) * x[i] + 0.5;", 60)
kernel("var_bound", [arr("a", D, [N1]), arr("b", D, [N1])],
       "        for (i = 0; i < n; i++)\n            a[i] = a[i] + b[i] * b[i];", 60,
       scalars=["int n = 4001"])
kernel("offset_bound", [arr("a", U, [N1]), arr("b", U, [N1])],
       "        for (i = 1; i < n - 1; i++)\n            a[i] = (b[i - 1] + b[i + 1]) >> 1;", 60,
       scalars=["int n = 3999"])
kernel("inclusive_bound", [arr("a", U, [N1]), arr("b", U, [N1])],
       "        for (i = 3; i <= 4000; i++)\n            a[i] = b[i] ^ (b[i] << 3);", 60)
kernel("bit_mix", [arr("a", U, [N1]), arr("b", U, [N1]), arr("c", U, [N1])],
       "        for (i = 0; i < 4096; i++) {\n            a[i] = (a[i] * 33u) ^ b[i];\n            c[i] = c[i] + (b[i] & 7u);\n        }", 60)
kernel("sqrt_norm", [arr("a", D, [N1]), arr("b", D, [N1])],
       "        for (i = 0; i < 4096; i++)\n            b[i] = sqrt(a[i] * a[i] + 1.0);", 40)

# Depth two.
kernel("matadd", [arr("a", D, [N2, N2]), arr("b", D, [N2, N2]), arr("c", D, [N2, N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++)\n                c[i][j] = a[i][j] + b[i][j];", 15,
       scalars=["int n = 128"])
kernel("transpose", [arr("a", D, [N2, N2]), arr("b", D, [N2, N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++)\n                b[j][i] = a[i][j];", 15,
       scalars=["int n = 128"])
kernel("jacobi2d", [arr("a", D, [N2, N2]), arr("b", D, [N2, N2])],
       "        for (i = 1; i < n - 1; i++)\n            for (j = 1; j < n - 1; j++)\n                b[i][j] = 0.2 * (a[i][j] + a[i - 1][j] + a[i + 1][j] + a[i][j - 1] + a[i][j + 1]);", 10,
       scalars=["int n = 128"])
kernel("matvec", [arr("A", D, [N2, N2]), arr("x", D, [N2]), arr("y", D, [N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++)\n                y[i] += A[i][j] * x[j];", 15,
       scalars=["int n = 128"])
kernel("seidel2d", [arr("a", D, [N2, N2])],
       "        for (i = 1; i < n; i++)\n            for (j = 1; j < n; j++)\n                a[i][j] = (a[i - 1][j] + a[i][j - 1]) * 0.5;", 12,
       scalars=["int n = 128"])
kernel("wavefront", [arr("a", U, [N2, N2])],
       "        for (i = 1; i < n; i++)\n            for (j = 0; j < n - 1; j++)\n                a[i][j] = a[i - 1][j + 1] + 1u;", 15,
       scalars=["int n = 128"])
kernel("pair2d", [arr("a", D, [N2, N2]), arr("b", D, [N2, N2]), arr("c", D, [N2, N2]), arr("d", D, [N2, N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++) {\n                c[i][j] = a[i][j] * 2.0;\n                d[i][j] = b[i][j] + 1.0;\n            }", 10,
       scalars=["int n = 128"])
kernel("triangular", [arr("a", D, [N2, N2]), arr("b", D, [N2, N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < i; j++)\n                a[i][j] = b[j][i] * 0.5;", 20,
       scalars=["int n = 128"])
kernel("outer", [arr("x", D, [N2]), arr("y", D, [N2]), arr("c", D, [N2, N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++)\n                c[i][j] = x[i] * y[j];", 15,
       scalars=["int n = 128"])
kernel("blur_u", [arr("img", U, [N2, N2]), arr("out", U, [N2, N2])],
       "        for (i = 1; i < n - 1; i++)\n            for (j = 1; j < n - 1; j++)\n                out[i][j] = (img[i][j - 1] + 2u * img[i][j] + img[i][j + 1]) >> 2;", 15,
       scalars=["int n = 128"])
kernel("var_bound2d", [arr("a", D, [N2, N2]), arr("b", D, [N2, N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < m; j++)\n                a[i][j] = a[i][j] * 0.5 + b[i][j];", 15,
       scalars=["int n = 125", "int m = 123"])
kernel("colsum", [arr("a", D, [N2, N2]), arr("s", D, [N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++)\n                s[j] += a[i][j];", 15,
       scalars=["int n = 128"])
kernel("conv1d", [arr("x", D, [N1]), arr("w", D, [8]), arr("y", D, [N1])],
       "        for (i = 0; i < n; i++)\n            for (k = 0; k < 8; k++)\n                y[i] += w[k] * x[i + k];", 6,
       scalars=["int n = 4088"])
kernel("threshold2d", [arr("a", D, [N2, N2]), arr("mask", U, [N2, N2])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++) {\n                if (a[i][j] > 0.5)\n                    mask[i][j] = 1u;\n            }", 15,
       scalars=["int n = 128"])

# Depth three.
kernel("matmul", [arr("A", D, [N3, N3]), arr("B", D, [N3, N3]), arr("C", D, [N3, N3])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++)\n                for (k = 0; k < n; k++)\n                    C[i][j] += A[i][k] * B[k][j];", 2,
       scalars=["int n = 48"])
kernel("tensor_add", [arr("u", D, [32, 32, 32]), arr("v", D, [32, 32, 32]), arr("t", D, [32, 32, 32])],
       "        for (i = 0; i < n; i++)\n            for (j = 0; j < n; j++)\n                for (k = 0; k < n; k++)\n                    t[i][j][k] = u[i][j][k] + v[i][j][k];", 4,
       scalars=["int n = 32"])


def render(k):
    scalars = list(k["scalars"])
    src = HEADER
    if "sqrt" in k["region"]:
        src = src.replace("#include <time.h>\n", "#include <time.h>\n#include <math.h>\n")
    src += "\n" + decl_code(k["arrays"], scalars) + "\n"
    src += HELPERS.format(seed=k["seed"])
    src += MAIN.format(
        init=init_code(k["arrays"]),
        reps=k["reps"] * 10,
        region=k["region"],
        hash=hash_code(k["arrays"], k["hashed"]),
    )
    return src


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "corpus")
    os.makedirs(out, exist_ok=True)
    for k in KERNELS:
        with open(os.path.join(out, k["name"] + ".c"), "w") as f:
            f.write(render(k))
    print(f"wrote {len(KERNELS)} loops to {out}")


if __name__ == "__main__":
    main()
