#pragma once

#include <chrono>
#include <csignal>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include "mmk/errors.hpp"

namespace mmk {

namespace fs = std::filesystem;

struct ExecResult {
    int exit_code = -1;
    std::string out;
    std::string err;
    bool timed_out = false;
    double elapsed_s = 0.0;
};

// Runs argv (no shell) with a hard timeout. On timeout the whole process
// group gets SIGKILL and we reap within the grace window.
inline ExecResult run_process(const std::vector<std::string>& argv, const fs::path& cwd,
                              std::chrono::milliseconds timeout,
                              std::chrono::milliseconds grace = std::chrono::milliseconds(2000)) {
    if (argv.empty()) throw Error(Errc::invalid_config, "empty argv");

    int out_pipe[2], err_pipe[2];
    if (pipe(out_pipe) != 0 || pipe(err_pipe) != 0)
        throw Error(Errc::io_error, "pipe() failed");

    pid_t pid = fork();
    if (pid < 0) throw Error(Errc::io_error, "fork() failed");

    if (pid == 0) {
        // child
        setpgid(0, 0);
        if (!cwd.empty() && chdir(cwd.c_str()) != 0) _exit(127);
        dup2(out_pipe[1], STDOUT_FILENO);
        dup2(err_pipe[1], STDERR_FILENO);
        close(out_pipe[0]);
        close(out_pipe[1]);
        close(err_pipe[0]);
        close(err_pipe[1]);
        std::vector<char*> args;
        args.reserve(argv.size() + 1);
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        execvp(args[0], args.data());
        _exit(127);
    }

    close(out_pipe[1]);
    close(err_pipe[1]);
    fcntl(out_pipe[0], F_SETFL, O_NONBLOCK);
    fcntl(err_pipe[0], F_SETFL, O_NONBLOCK);

    ExecResult result;
    auto start = std::chrono::steady_clock::now();
    auto deadline = start + timeout;

    bool out_open = true, err_open = true;
    bool killed = false;
    int status = 0;
    bool reaped = false;
    char buf[8192];

    auto drain = [&](int fd, std::string& into, bool& open_flag) {
        while (open_flag) {
            ssize_t n = read(fd, buf, sizeof(buf));
            if (n > 0) {
                into.append(buf, static_cast<size_t>(n));
            } else if (n == 0) {
                open_flag = false;
            } else {
                break; // EAGAIN
            }
        }
    };

    while (true) {
        struct pollfd fds[2];
        nfds_t nfds = 0;
        if (out_open) fds[nfds++] = {out_pipe[0], POLLIN, 0};
        if (err_open) fds[nfds++] = {err_pipe[0], POLLIN, 0};

        auto now = std::chrono::steady_clock::now();
        if (!killed && now >= deadline) {
            kill(-pid, SIGKILL);
            killed = true;
            result.timed_out = true;
        }
        int wait_ms = 50;
        if (!killed) {
            auto remain =
                std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
            wait_ms = static_cast<int>(std::min<long long>(std::max<long long>(remain, 0), 50));
        }

        if (nfds > 0) {
            poll(fds, nfds, wait_ms);
            drain(out_pipe[0], result.out, out_open);
            drain(err_pipe[0], result.err, err_open);
        }

        pid_t done = waitpid(pid, &status, WNOHANG);
        if (done == pid) {
            reaped = true;
            // pull any remaining buffered output
            drain(out_pipe[0], result.out, out_open);
            drain(err_pipe[0], result.err, err_open);
            break;
        }
        if (killed) {
            auto since_kill = std::chrono::steady_clock::now() - deadline;
            if (since_kill > grace) break; // give up waiting; child is unkillable
        }
        if (nfds == 0 && !killed) {
            // pipes closed but child alive; avoid a busy loop
            usleep(10 * 1000);
        }
    }

    if (!reaped) waitpid(pid, &status, WNOHANG);
    close(out_pipe[0]);
    close(err_pipe[0]);

    if (reaped && WIFEXITED(status)) result.exit_code = WEXITSTATUS(status);
    else if (reaped && WIFSIGNALED(status)) result.exit_code = 128 + WTERMSIG(status);

    result.elapsed_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

inline bool command_exists(const std::string& name) {
    const char* path_env = std::getenv("PATH");
    if (!path_env) return false;
    std::string path(path_env);
    size_t pos = 0;
    while (pos <= path.size()) {
        size_t colon = path.find(':', pos);
        std::string dir = path.substr(pos, colon == std::string::npos ? std::string::npos : colon - pos);
        if (!dir.empty() && fs::exists(fs::path(dir) / name)) return true;
        if (colon == std::string::npos) break;
        pos = colon + 1;
    }
    return false;
}

} // namespace mmk
