#include <stdio.h>
#include <string.h>
#include "chatwatch.h"

static int fail(const char *what) {
    const char *err = cw_last_error();
    fprintf(stderr, "%s failed: %s\n", what, err ? err : "(none)");
    return 1;
}

int main(void) {
    CwMessageKind kind;
    int32_t index;
    if (cw_classify_message("  START ", &kind, &index) != CW_STATUS_OK) return fail("classify");
    if (kind != CW_MESSAGE_KIND_BUTTON || index != 6) return fail("classify result");

    double rows[4 * CW_N_FEATURES] = {0};
    rows[3 * CW_N_FEATURES] = 1.0;
    double scores[4];
    int32_t labels[4];
    if (cw_score(rows, 4, CW_METHOD_KMEANS, 0, 40.0, NULL, scores, labels) != CW_STATUS_OK) return fail("score");
    if (labels[3] != CW_LABEL_TROLL || labels[0] != CW_LABEL_NORMAL || scores[3] != 100.0) return fail("score result");

    CwEngine *engine = NULL;
    if (cw_engine_new("recluster_interval_s = 60\nmin_messages = 1\n", &engine) != CW_STATUS_OK) return fail("engine_new");
    char line[256];
    for (int i = 0; i < 200; i++) {
        snprintf(line, sizeof line,
                 "<date>2014-02-14</date><time>00:%02d:%02d</time><user>u%d</user><msg>%s</msg>",
                 i / 60, i % 60, i % 7, i % 7 == 0 ? "start" : "up");
        if (cw_engine_push_line(engine, line) != CW_STATUS_OK) return fail("push");
    }
    if (cw_engine_finish(engine) != CW_STATUS_OK) return fail("finish");
    int events = 0;
    char *json = NULL;
    do {
        if (cw_engine_poll(engine, &json) != CW_STATUS_OK) return fail("poll");
        if (json) {
            events++;
            cw_string_free(json);
        }
    } while (json);
    int32_t label;
    if (cw_engine_label(engine, "u3", &label) != CW_STATUS_OK || label == CW_LABEL_UNKNOWN) return fail("label");
    if (cw_engine_push_line(engine, line) != CW_STATUS_ENGINE_FINISHED) return fail("finished guard");
    cw_engine_free(engine);
    printf("ok %d events version %s\n", events, cw_version());
    return events > 0 ? 0 : 1;
}
