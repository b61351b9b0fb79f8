#include <stdio.h>
#include <stdint.h>
#include <time.h>

typedef int I32;

static double x[128];
static double y[128];
static double c[128][128];
int n = 128;

static uint32_t lcg_state = 12345u;

static uint32_t lcg(void)
{
    lcg_state = lcg_state * 1664525u + 1013904223u;
    return lcg_state >> 8;
}

static double lcg_unit(void)
{
    return (double)(lcg() % 10000u) / 10000.0;
}

static uint64_t fnv(const void *data, size_t len, uint64_t h)
{
    const unsigned char *p = (const unsigned char *)data;
    for (size_t q = 0; q < len; q++) {
        h ^= p[q];
        h *= 1099511628211ULL;
    }
    return h;
}

int main(void)
{
    int i, j, k, Class, rep;
    struct timespec t0, t1;
    for (size_t q = 0; q < 128; q++) x[q] = lcg_unit();
    for (size_t q = 0; q < 128; q++) y[q] = lcg_unit();
    for (size_t q = 0; q < 16384; q++) (((double *)c))[q] = lcg_unit();
    clock_gettime(CLOCK_MONOTONIC, &t0);
    for (rep = 0; rep < 150; rep++) {
#pragma looplearner begin
        for (i = 0; i < n; i++)
            for (j = 0; j < n; j++)
                c[i][j] = x[i] * y[j];
#pragma looplearner end
        __asm__ volatile("" ::: "memory");
    }
    clock_gettime(CLOCK_MONOTONIC, &t1);
    printf("time %.9f\n", (double)(t1.tv_sec - t0.tv_sec) + (double)(t1.tv_nsec - t0.tv_nsec) * 1e-9);
    uint64_t h = 1469598103934665603ULL;
    h = fnv(x, sizeof x, h);
    h = fnv(y, sizeof y, h);
    h = fnv(c, sizeof c, h);
    printf("checksum %016llx\n", (unsigned long long)h);
    return 0;
}
