#include <stdio.h>
#include <string.h>
#include "stlattice.h"

#define CHECK(x) do { StlStatus s_ = (x); if (s_ != STL_STATUS_OK) { \
    fprintf(stderr, "%s -> %d: %s\n", #x, (int)s_, stl_last_error()); return 1; } } while (0)

int main(int argc, char **argv) {
    if (argc != 2) return 2;
    StlConfig *cfg = NULL;
    CHECK(stl_config_from_toml(
        "[scenario]\npreset = \"fastsmall\"\n[detector]\nkind = \"noiseless\"\n", &cfg));
    CHECK(stl_config_set_seed(cfg, 3));
    CHECK(stl_config_set_out(cfg, argv[1]));

    StlRun *run = NULL;
    CHECK(stl_run(cfg, false, &run));
    StlRunSummary sum;
    CHECK(stl_run_summary(run, 0, &sum));
    char *json = NULL;
    CHECK(stl_run_json(run, 0, &json));
    printf("seed=%llu map=%.6f keyframes=%zu json=%zu\n",
           (unsigned long long)sum.seed, sum.map, sum.n_keyframes, strlen(json));
    stl_string_free(json);
    stl_run_free(run);
    stl_config_free(cfg);

    StlBox a = {10, 10, 4, 4}, b = {11, 10, 4, 4};
    double v = 0;
    CHECK(stl_iou(&a, &b, &v));
    printf("iou=%.6f\n", v);

    if (stl_iou(NULL, &b, &v) != STL_STATUS_NULL_POINTER) return 1;
    printf("error=%s\n", stl_last_error());
    return 0;
}
