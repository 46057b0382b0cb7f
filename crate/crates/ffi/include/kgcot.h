#ifndef KGCOT_H
#define KGCOT_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum KgcotStatus {
  KGCOT_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8, bad bound or label outside {0, 1}.
   */
  KGCOT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unreadable or malformed input tables.
   */
  KGCOT_STATUS_INPUT = 2,
  /**
   * A node id that is not in the graph.
   */
  KGCOT_STATUS_NOT_FOUND = 3,
  /**
   * The metric is undefined for this input (a class is empty).
   */
  KGCOT_STATUS_UNDEFINED = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  KGCOT_STATUS_PANIC = 5,
} KgcotStatus;

typedef enum KgcotConclusion {
  KGCOT_CONCLUSION_NO = 0,
  KGCOT_CONCLUSION_YES = 1,
  KGCOT_CONCLUSION_UNPARSEABLE = 2,
} KgcotConclusion;

/**
 * Opaque handle to a loaded knowledge graph.
 */
typedef struct KgcotGraph KgcotGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a graph from node and edge tables with the default TSV columns.
 *
 * # Safety
 * `nodes_path` and `edges_path` must be NUL-terminated strings and `out` a
 * writable pointer. On success `*out` must later be passed to
 * [`kgcot_graph_free`].
 */
enum KgcotStatus kgcot_graph_load(const char *nodes_path,
                                  const char *edges_path,
                                  struct KgcotGraph **out);

/**
 * Release a graph. Null is ignored.
 *
 * # Safety
 * `graph` must come from [`kgcot_graph_load`] and not be freed twice.
 */
void kgcot_graph_free(struct KgcotGraph *graph);

/**
 * # Safety
 * `graph` must be a live handle and `out` writable.
 */
enum KgcotStatus kgcot_graph_node_count(const struct KgcotGraph *graph, size_t *out);

/**
 * # Safety
 * `graph` must be a live handle and `out` writable.
 */
enum KgcotStatus kgcot_graph_edge_count(const struct KgcotGraph *graph, size_t *out);

/**
 * All minimum-length paths from `src` to `dst` within `max_hops`, as a JSON
 * array of `{"nodes": [...], "steps": [...]}` objects. An empty array means
 * no path within the bound.
 *
 * # Safety
 * `graph` must be a live handle, `src` and `dst` NUL-terminated strings and
 * `out_json` writable. The returned string is freed with [`kgcot_string_free`].
 */
enum KgcotStatus kgcot_shortest_paths_json(const struct KgcotGraph *graph,
                                           const char *src,
                                           const char *dst,
                                           size_t max_hops,
                                           size_t max_paths,
                                           bool directed,
                                           char **out_json);

/**
 * Area under the ROC curve with ties counted one half. Returns
 * `Undefined` (and writes NaN) when either class is empty.
 *
 * # Safety
 * `scores` and `labels` must each point to `n` readable elements; `out` must
 * be writable.
 */
enum KgcotStatus kgcot_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Average precision over descending unique thresholds. Returns `Undefined`
 * (and writes NaN) when there are no positives.
 *
 * # Safety
 * Same contract as [`kgcot_auroc`].
 */
enum KgcotStatus kgcot_aupr(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Read the `Conclusion: Yes|No` verdict of a generated rationale.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` writable.
 */
enum KgcotStatus kgcot_parse_conclusion(const char *text, enum KgcotConclusion *out);

/**
 * Message for the last failed call on this thread, or "" after a success.
 * The pointer stays valid until the next `kgcot_*` call on the same thread.
 */
const char *kgcot_last_error_message(void);

/**
 * Free a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void kgcot_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kgcot_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGCOT_H */
