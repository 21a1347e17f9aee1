#include <math.h>
#include <stdio.h>
#include <string.h>

#include "pointnr.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "check failed line %d: %s (%s)\n", __LINE__, \
                    #cond, pr_last_error_message());                  \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    CHECK(pr_abi_version() == PR_ABI_VERSION);

    PrCamera cam = {20.0, 20.0, 3.5, 2.5, 8, 6, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}};
    float pts[6] = {0.0f, 0.0f, 2.0f, 0.0f, 0.0f, 1.0f};
    int32_t index[48];
    float depth[48];
    CHECK(pr_rasterize(pts, 2, &cam, 0, index, depth, 48) == PR_STATUS_OK);
    int covered = 0;
    for (int i = 0; i < 48; i++) {
        if (index[i] >= 0) {
            CHECK(index[i] == 1 && depth[i] == 1.0f);
            covered++;
        } else {
            CHECK(index[i] == -1 && isinf(depth[i]));
        }
    }
    CHECK(covered == 1);
    CHECK(pr_rasterize(pts, 2, &cam, 0, index, depth, 47) == PR_STATUS_BUFFER_SIZE);
    CHECK(strlen(pr_last_error_message()) > 0);
    CHECK(pr_rasterize(pts, 2, NULL, 0, index, depth, 48) == PR_STATUS_NULL_ARGUMENT);

    float img[12 * 12 * 3];
    for (int i = 0; i < 12 * 12 * 3; i++) img[i] = (float)(i % 7) / 7.0f;
    double v = 0.0;
    CHECK(pr_psnr(img, img, 12, 12, &v) == PR_STATUS_OK && v == 99.0);
    CHECK(pr_ssim(img, img, 12, 12, &v) == PR_STATUS_OK && fabs(v - 1.0) < 1e-12);
    CHECK(pr_ssim(img, img, 4, 4, &v) == PR_STATUS_DATA);

    PrModel *m = NULL;
    CHECK(pr_model_open("/nonexistent/checkpoint", &m) == PR_STATUS_DATA && m == NULL);
    CHECK(pr_model_num_points(NULL) == 0);
    pr_model_free(NULL);
    puts("ok");
    return 0;
}
