#ifndef BISIMCERT_H
#define BISIMCERT_H

/* Generated by cbindgen from the bisimcert-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BcStatus {
  BC_STATUS_OK = 0,
  BC_STATUS_NULL_POINTER = 1,
  BC_STATUS_INVALID_ARGUMENT = 2,
  BC_STATUS_PARSE = 3,
  BC_STATUS_UNSUPPORTED_PAIR = 4,
  BC_STATUS_INSUFFICIENT_SAMPLES = 5,
  BC_STATUS_IO = 6,
  BC_STATUS_PANIC = 7,
  BC_STATUS_OTHER = 8,
} BcStatus;

/**
 * Opaque certificate handle.
 */
typedef struct BcCertificate BcCertificate;

/**
 * Opaque latent MDP handle.
 */
typedef struct BcLatentMdp BcLatentMdp;

/**
 * Lipschitz constants of a latent chain under the discrete metric.
 */
typedef struct BcLipschitz {
  double kr;
  double kp;
  double kv;
  double rmax;
} BcLipschitz;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Error message of the most recent call on this thread; empty after a
 * success. The pointer stays valid until the next call on the thread.
 */
const char *bc_last_error_message(void);

/**
 * Static version string of the library.
 */
const char *bc_version(void);

/**
 * Steps needed for both loss estimates to be epsilon-accurate with
 * probability at least `1 - delta`.
 *
 * # Safety
 * `out` must be null or point to writable memory for a `uint64_t`.
 */
enum BcStatus bc_required_samples_loss(double epsilon, double delta, uint64_t *out);

/**
 * Steps needed for the value-difference guarantee.
 *
 * # Safety
 * `out` must be null or point to writable memory for a `uint64_t`.
 */
enum BcStatus bc_required_samples_value(double epsilon,
                                        double delta,
                                        double gamma,
                                        double kv,
                                        uint64_t *out);

/**
 * Parses a latent MDP from its JSON form.
 *
 * # Safety
 * `json` must be a valid nul-terminated string and `out` writable.
 */
enum BcStatus bc_latent_mdp_from_json(const char *json, struct BcLatentMdp **out);

/**
 * Releases a handle from [`bc_latent_mdp_from_json`]. Null is ignored.
 *
 * # Safety
 * `mdp` must be null or a handle not yet freed.
 */
void bc_latent_mdp_free(struct BcLatentMdp *mdp);

/**
 * Number of instantiated latent states.
 *
 * # Safety
 * `mdp` must be a live handle and `out` writable.
 */
enum BcStatus bc_latent_mdp_num_states(const struct BcLatentMdp *mdp, size_t *out);

/**
 * Lipschitz constants of the chain induced by a policy. A null policy
 * means uniform over actions.
 *
 * # Safety
 * `mdp` must be a live handle, `policy_json` null or a valid string, and
 * `out` writable.
 */
enum BcStatus bc_lipschitz(const struct BcLatentMdp *mdp,
                           const char *policy_json,
                           double gamma,
                           struct BcLipschitz *out);

/**
 * Assembles a certificate from loss estimates over `t` transitions.
 *
 * # Safety
 * `constants` must point to a valid [`BcLipschitz`] and `out` be writable.
 */
enum BcStatus bc_assemble_certificate(double lr,
                                      double lp,
                                      uint64_t t,
                                      double epsilon,
                                      double delta,
                                      double gamma,
                                      const struct BcLipschitz *constants,
                                      struct BcCertificate **out);

/**
 * Releases a certificate handle. Null is ignored.
 *
 * # Safety
 * `cert` must be null or a handle not yet freed.
 */
void bc_certificate_free(struct BcCertificate *cert);

/**
 * JSON report of a certificate; release with [`bc_string_free`].
 *
 * # Safety
 * `cert` must be a live handle and `out` writable.
 */
enum BcStatus bc_certificate_to_json(const struct BcCertificate *cert, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned through a `char **` argument.
 */
void bc_string_free(char *s);

/**
 * Writes the PRISM explicit files of `mdp` next to `prefix`; a non-null
 * policy adds the induced chain files.
 *
 * # Safety
 * `mdp` must be a live handle, `prefix` a valid string and `policy_json`
 * null or a valid string.
 */
enum BcStatus bc_export_prism(const struct BcLatentMdp *mdp,
                              const char *policy_json,
                              const char *prefix);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BISIMCERT_H */
