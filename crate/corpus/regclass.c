#include <stdio.h>
#include <stdint.h>
#include <time.h>

typedef int I32;

static I32 opnd[40];
static I32 Perl_fold[256];

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
    for (size_t q = 0; q < 40; q++) opnd[q] = (I32)(lcg() % 64u);
    for (size_t q = 0; q < 256; q++) Perl_fold[q] = (I32)(lcg() % 64u);
    clock_gettime(CLOCK_MONOTONIC, &t0);
    for (rep = 0; rep < 4000; rep++) {
#pragma looplearner begin
        for (Class = 0; Class < 256; ++Class) {
            if (opnd[1 + (Class >> 3 & 31)] & 1 << (Class & 7)) {
                I32 cf = Perl_fold[Class];
                opnd[1 + (cf >> 3 & 31)] |= 1 << (cf & 7);
            }
        }
#pragma looplearner end
        __asm__ volatile("" ::: "memory");
    }
    clock_gettime(CLOCK_MONOTONIC, &t1);
    printf("time %.9f\n", (double)(t1.tv_sec - t0.tv_sec) + (double)(t1.tv_nsec - t0.tv_nsec) * 1e-9);
    uint64_t h = 1469598103934665603ULL;
    h = fnv(opnd, sizeof opnd, h);
    h = fnv(Perl_fold, sizeof Perl_fold, h);
    printf("checksum %016llx\n", (unsigned long long)h);
    return 0;
}
