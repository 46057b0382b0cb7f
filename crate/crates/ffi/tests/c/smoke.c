#include <math.h>
#include <stdio.h>
#include <string.h>

#include "kgcot.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond,    \
                    kgcot_last_error_message());                      \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 3) return 2;
    KgcotGraph *g = NULL;
    CHECK(kgcot_graph_load(argv[1], argv[2], &g) == KGCOT_STATUS_OK);
    size_t nodes = 0;
    CHECK(kgcot_graph_node_count(g, &nodes) == KGCOT_STATUS_OK && nodes == 40);

    char *json = NULL;
    CHECK(kgcot_shortest_paths_json(g, "K03", "K01", 5, 16, false, &json) == KGCOT_STATUS_OK);
    CHECK(strstr(json, "\"nodes\":[\"K03\",\"K01\"]") != NULL);
    kgcot_string_free(json);

    CHECK(kgcot_shortest_paths_json(g, "K03", "NOPE", 5, 16, false, &json) == KGCOT_STATUS_NOT_FOUND);
    CHECK(json == NULL && strstr(kgcot_last_error_message(), "NOPE") != NULL);
    kgcot_graph_free(g);

    double scores[] = {0.1, 0.4, 0.35, 0.8};
    uint8_t labels[] = {0, 0, 1, 1};
    double v = 0;
    CHECK(kgcot_auroc(scores, labels, 4, &v) == KGCOT_STATUS_OK && fabs(v - 0.75) < 1e-12);
    CHECK(kgcot_aupr(scores, labels, 4, &v) == KGCOT_STATUS_OK && fabs(v - 0.8333333333333334) < 1e-12);
    uint8_t none[] = {0, 0, 0, 0};
    CHECK(kgcot_aupr(scores, none, 4, &v) == KGCOT_STATUS_UNDEFINED && isnan(v));

    KgcotConclusion c;
    CHECK(kgcot_parse_conclusion("Risk is high.\nConclusion: Yes", &c) == KGCOT_STATUS_OK);
    CHECK(c == KGCOT_CONCLUSION_YES);
    CHECK(strlen(kgcot_version()) > 0);
    puts("ok");
    return 0;
}
