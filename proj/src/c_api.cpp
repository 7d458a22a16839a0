#include "cjmix/cjmix.h"

#include "cjmix/errors.hpp"
#include "cjmix/runner.hpp"

#include <exception>
#include <new>
#include <string>

struct cjmix_session {
  cjmix::RunRequest request;
  cjmix::RunOutcome last;
};

namespace {

thread_local std::string last_error;

cjmix_status fail(cjmix_status code, const std::string& msg) {
  last_error = msg;
  return code;
}

// Runs `fn`, mapping library exceptions to status codes.
template <class Fn>
cjmix_status guarded(Fn&& fn) {
  last_error.clear();
  try {
    return fn();
  } catch (const cjmix::InputError& e) {
    return fail(CJMIX_ERR_INPUT, e.what());
  } catch (const cjmix::ImproperPriorError& e) {
    return fail(CJMIX_ERR_IMPROPER_PRIOR, e.what());
  } catch (const std::bad_alloc&) {
    return fail(CJMIX_ERR_FAILURE, "out of memory");
  } catch (const std::exception& e) {
    return fail(CJMIX_ERR_FAILURE, e.what());
  } catch (...) {
    return fail(CJMIX_ERR_FAILURE, "unknown error");
  }
}

cjmix_status open_with(cjmix::RunConfig cfg, cjmix_session** out) {
  auto* s = new cjmix_session;
  s->request.config = std::move(cfg);
  *out = s;
  return CJMIX_OK;
}

}  // namespace

extern "C" {

const char* cjmix_version(void) { return cjmix::kVersion; }

const char* cjmix_last_error(void) { return last_error.c_str(); }

cjmix_status cjmix_session_open(const char* config_path, cjmix_session** out) {
  if (!config_path || !out) return fail(CJMIX_ERR_INPUT, "null argument");
  *out = nullptr;
  return guarded([&] { return open_with(cjmix::load_config(config_path), out); });
}

cjmix_status cjmix_session_open_json(const char* config_json, cjmix_session** out) {
  if (!config_json || !out) return fail(CJMIX_ERR_INPUT, "null argument");
  *out = nullptr;
  return guarded([&] { return open_with(cjmix::parse_config(config_json), out); });
}

void cjmix_session_close(cjmix_session* session) { delete session; }

cjmix_status cjmix_session_set_data(cjmix_session* session, const char* profiles_csv, const char* moderators_csv) {
  if (!session || !profiles_csv) return fail(CJMIX_ERR_INPUT, "null argument");
  session->request.profiles = profiles_csv;
  if (moderators_csv) {
    session->request.moderators = moderators_csv;
  } else {
    session->request.moderators.reset();
  }
  return CJMIX_OK;
}

cjmix_status cjmix_session_set_output(cjmix_session* session, const char* directory) {
  if (!session || !directory) return fail(CJMIX_ERR_INPUT, "null argument");
  session->request.out = directory;
  return CJMIX_OK;
}

cjmix_status cjmix_session_set_seed(cjmix_session* session, uint64_t seed) {
  if (!session) return fail(CJMIX_ERR_INPUT, "null argument");
  session->request.seed = seed;
  return CJMIX_OK;
}

cjmix_status cjmix_session_set_threads(cjmix_session* session, int threads) {
  if (!session) return fail(CJMIX_ERR_INPUT, "null argument");
  if (threads < 1) return fail(CJMIX_ERR_INPUT, "threads must be at least 1");
  session->request.threads = threads;
  return CJMIX_OK;
}

cjmix_status cjmix_session_set_strict(cjmix_session* session, int strict) {
  if (!session) return fail(CJMIX_ERR_INPUT, "null argument");
  session->request.strict = strict != 0;
  return CJMIX_OK;
}

cjmix_status cjmix_session_run(cjmix_session* session, cjmix_command command) {
  if (!session) return fail(CJMIX_ERR_INPUT, "null argument");
  session->last = {};
  return guarded([&] {
    const cjmix::RunRequest& req = session->request;
    switch (command) {
      case CJMIX_CMD_FIT: session->last = cjmix::run_fit(req); break;
      case CJMIX_CMD_TUNE: session->last = cjmix::run_tune(req); break;
      case CJMIX_CMD_EFFECTS: session->last = cjmix::run_effects(req); break;
      case CJMIX_CMD_SIMULATE: session->last = cjmix::run_simulate(req); break;
      case CJMIX_CMD_VALIDATE: session->last = cjmix::run_validate(req); break;
      default: return fail(CJMIX_ERR_INPUT, "unknown command");
    }
    if (session->last.status == cjmix::RunStatus::not_converged)
      return fail(CJMIX_ERR_NOT_CONVERGED, "fit did not converge (strict mode)");
    return static_cast<cjmix_status>(session->last.status);
  });
}

size_t cjmix_session_message_count(const cjmix_session* session) { return session ? session->last.messages.size() : 0; }

const char* cjmix_session_message(const cjmix_session* session, size_t index) {
  if (!session || index >= session->last.messages.size()) return nullptr;
  return session->last.messages[index].c_str();
}

size_t cjmix_session_output_count(const cjmix_session* session) { return session ? session->last.outputs.size() : 0; }

const char* cjmix_session_output(const cjmix_session* session, size_t index) {
  if (!session || index >= session->last.outputs.size()) return nullptr;
  return session->last.outputs[index].c_str();
}

}  // extern "C"
