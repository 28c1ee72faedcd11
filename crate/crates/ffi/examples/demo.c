/* Builds a model, embeds two text rows and prints them.
 *
 *   cargo build -p mmcaps-ffi --release
 *   cc -std=c99 -Icrates/ffi/include crates/ffi/examples/demo.c \
 *      target/release/libmmcaps_ffi.a -lm -lpthread -ldl -o demo
 */
#include <stdio.h>

#include "mmcaps.h"

static const char *CONFIG =
    "{\"C\": 4, \"d1\": 4, \"d2\": 8, \"D\": 6, \"heads\": 2, \"hidden_mlp\": 16,"
    " \"dropout_p\": 0.1, \"input_dims\": {\"video\": 10, \"audio\": 8, \"text\": 6},"
    " \"routing\": \"self_attention\", \"routing_iters\": 3, \"share_weights\": true}";

int main(void) {
    MmcapsModel *model = NULL;
    if (mmcaps_model_new_from_json(CONFIG, 0, &model) != MMCAPS_STATUS_OK) {
        fprintf(stderr, "error: %s\n", mmcaps_last_error_message());
        return 1;
    }
    double text[12];
    for (int i = 0; i < 12; i++) text[i] = 0.1 * i;
    size_t d = mmcaps_model_embed_dim(model);
    double out[12];
    MmcapsStatus s = mmcaps_model_embed(model, MMCAPS_MODALITY_TEXT, text, 2, 6, out, 2 * d);
    if (s != MMCAPS_STATUS_OK) {
        fprintf(stderr, "error %d: %s\n", (int)s, mmcaps_last_error_message());
        mmcaps_model_free(model);
        return 1;
    }
    for (size_t i = 0; i < 2 * d; i++) printf("%.6f%c", out[i], (i + 1) % d ? ' ' : '\n');

    MmcapsRetrieval r;
    mmcaps_retrieval_metrics(out, out, 2, d, MMCAPS_METRIC_EUCLIDEAN, &r);
    double loss = 0.0;
    const double sim[4] = {1.0, 0.0, 0.0, 1.0};
    mmcaps_mms_pair_loss(sim, 2, 0.0, &loss);
    printf("r1 %.2f medr %.1f loss %.6f params %zu\n", r.r1, r.medr, loss, mmcaps_model_param_count(model));
    mmcaps_model_free(model);
    return 0;
}
