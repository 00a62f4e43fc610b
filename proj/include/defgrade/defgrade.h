#pragma once

/* C interface of the defgrade library. Every function returns a dg_status;
 * on failure dg_last_error() describes the problem (per thread). Strings
 * handed out through char** parameters are owned by the caller and must be
 * released with dg_string_free. JSON is used for structured in/out values. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DG_API __declspec(dllexport)
#else
#define DG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dg_status {
  DG_OK = 0,
  DG_ERR_USAGE = 1,        /* bad argument or option */
  DG_ERR_CONFIG = 2,       /* configuration or input data problem */
  DG_ERR_PREREQUISITE = 3, /* an earlier stage has not been run */
  DG_ERR_RUNTIME = 4       /* I/O, network, model or internal failure */
} dg_status;

typedef struct dg_project dg_project;
typedef struct dg_tree dg_tree;

DG_API const char* dg_version(void);
DG_API const char* dg_last_error(void);
DG_API void dg_string_free(char* s);

/* overrides_json may be NULL; it is merge-patched over the config file. */
DG_API dg_status dg_project_open(const char* config_path, const char* overrides_json, dg_project** out);
DG_API void dg_project_close(dg_project* project);
DG_API dg_status dg_project_config(const dg_project* project, char** out_json);

/* stage: prep, eval, select, genqa, export, train-toy, gradcheck, report.
 * options_json may be NULL. The stage summary is returned in out_json. */
DG_API dg_status dg_run_stage(dg_project* project, const char* stage, const char* options_json, char** out_json);

/* Line input for interactive review: copy one line (without the newline)
 * into buf and return its length, or return -1 at end of input. */
typedef long (*dg_read_line_fn)(void* user, char* buf, size_t cap);
typedef void (*dg_write_fn)(void* user, const char* text, size_t len);

DG_API dg_status dg_review(dg_project* project, const char* options_json, dg_read_line_fn read_line,
                           dg_write_fn write, void* user, char** out_json);

DG_API dg_status dg_tree_parse(const char* source, dg_tree** out);
DG_API dg_status dg_tree_load(const char* path, dg_tree** out);
DG_API void dg_tree_free(dg_tree* tree);
DG_API dg_status dg_tree_render(const dg_tree* tree, char** out_text);
/* answers_json: ["Yes", "Not Exists", ...]; out_grade receives the grade. */
DG_API dg_status dg_tree_evaluate(const dg_tree* tree, const char* answers_json, char** out_grade);
/* cot_json: {"steps": [...], "grade": "..."}; out_json: validation report. */
DG_API dg_status dg_tree_validate(const dg_tree* tree, const char* cot_json, char** out_json);
/* Free text from a model: parsed, repaired when possible, as JSON. */
DG_API dg_status dg_parse_answer(const dg_tree* tree, const char* raw, char** out_json);

DG_API dg_status dg_resize_dims(uint32_t width, uint32_t height, uint32_t* out_width, uint32_t* out_height);
/* pairs_json: {"predicted": [...], "truth": [...], "classes": [...]?} */
DG_API dg_status dg_metrics(const char* pairs_json, char** out_json);
/* options_json: {"out_dir": "...", "seed": n, "per_grade_total": {...},
 * "large_images": bool, "assets_dir": "..."} */
DG_API dg_status dg_synth_project(const char* options_json, char** out_json);

#ifdef __cplusplus
}
#endif
